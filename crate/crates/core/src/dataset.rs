//! In-memory dataset of person images with skeletons, identities, cameras
//! and a train/query/gallery split, plus its directory layout:
//!
//! ```text
//! <dir>/images/<identity>_<camera>_<index>.png
//! <dir>/keypoints.txt     one `<sample_id> x:y:v,...` record per image
//! <dir>/split.json        {"train": [...], "query": [...], "gallery": [...]}
//! <dir>/identities.json   optional palette metadata (synthetic data only)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{format_keypoints, parse_keypoint_file, KeypointSet};
use crate::raster::PersonImage;
use crate::synth::StickIdentity;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub identity: usize,
    pub camera: usize,
    pub image: PersonImage,
    pub keypoints: KeypointSet,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub query: Vec<String>,
    pub gallery: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
    /// Present for generated data; enables the palette oracles.
    pub identities: Vec<StickIdentity>,
}

/// Parses `<identity>_<camera>_<index>` sample ids.
pub fn parse_sample_id(id: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = id.split('_').collect();
    let bad = || Error::parse("sample id", format!("expected <identity>_<camera>_<index>, got {id:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n = |s: &str| s.parse::<usize>().map_err(|_| bad());
    Ok((n(parts[0])?, n(parts[1])?, n(parts[2])?))
}

pub fn sample_id(identity: usize, camera: usize, index: usize) -> String {
    format!("{identity:04}_{camera}_{index:03}")
}

impl Dataset {
    pub fn index(&self) -> HashMap<&str, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    fn pick(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        let index = self.index();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| &self.samples[i])
                    .ok_or_else(|| Error::Dataset(format!("split references unknown sample {id}")))
            })
            .collect()
    }

    pub fn train(&self) -> Result<Vec<&Sample>> {
        self.pick(&self.split.train)
    }

    pub fn query(&self) -> Result<Vec<&Sample>> {
        self.pick(&self.split.query)
    }

    pub fn gallery(&self) -> Result<Vec<&Sample>> {
        self.pick(&self.split.gallery)
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.image.dims())
    }

    pub fn identity(&self, label: usize) -> Option<&StickIdentity> {
        self.identities.iter().find(|i| i.id == label)
    }

    /// Checks split disjointness/coverage and that images share one size.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Dataset("dataset has no samples".into()));
        }
        let dims = self.samples[0].image.dims();
        if let Some(s) = self.samples.iter().find(|s| s.image.dims() != dims) {
            return Err(Error::Dataset(format!(
                "sample {} is {:?}, expected {dims:?}",
                s.id,
                s.image.dims()
            )));
        }
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (name, ids) in [
            ("train", &self.split.train),
            ("query", &self.split.query),
            ("gallery", &self.split.gallery),
        ] {
            for id in ids {
                if let Some(prev) = seen.insert(id, name) {
                    return Err(Error::Dataset(format!("sample {id} is in both {prev} and {name}")));
                }
            }
        }
        self.train()?;
        self.query()?;
        self.gallery()?;
        Ok(())
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut kp = String::new();
        for s in &self.samples {
            s.image.save_png(&images.join(format!("{}.png", s.id)))?;
            kp.push_str(&format_keypoints(&s.id, &s.keypoints));
            kp.push('\n');
        }
        write_file(&dir.join("keypoints.txt"), kp.as_bytes())?;
        write_json(&dir.join("split.json"), &self.split)?;
        if !self.identities.is_empty() {
            write_json(&dir.join("identities.json"), &self.identities)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let kp_path = dir.join("keypoints.txt");
        let text = fs::read_to_string(&kp_path).map_err(|e| Error::io(&kp_path, e))?;
        let records = parse_keypoint_file(&text).map_err(|e| match e {
            Error::Parse { field, message } => Error::Format {
                path: kp_path.clone(),
                message: format!("{field}: {message}"),
            },
            other => other,
        })?;
        let mut samples = Vec::with_capacity(records.len());
        for (id, keypoints) in records {
            let (identity, camera, _) = parse_sample_id(&id)?;
            let image = PersonImage::load_png(&dir.join("images").join(format!("{id}.png")))?;
            samples.push(Sample {
                id,
                identity,
                camera,
                image,
                keypoints,
            });
        }
        let split: Split = read_json(&dir.join("split.json"))?;
        let ids_path = dir.join("identities.json");
        let identities = if ids_path.exists() {
            read_json(&ids_path)?
        } else {
            Vec::new()
        };
        let ds = Self {
            samples,
            split,
            identities,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Samples grouped by identity, in sample order.
    pub fn by_identity<'a>(samples: &[&'a Sample]) -> BTreeMap<usize, Vec<&'a Sample>> {
        let mut map: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
        for s in samples {
            map.entry(s.identity).or_default().push(s);
        }
        map
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
