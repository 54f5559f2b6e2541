use std::collections::BTreeSet;

use posenorm_core::pose::{
    format_keypoints, parse_keypoints, rasterize_pose, to_signed, Joint, KeypointSet, LimbSchema, NUM_JOINTS,
};
use proptest::prelude::*;

fn joint() -> impl Strategy<Value = Joint> {
    (-0.2f32..1.2, -0.2f32..1.2, prop::bool::weighted(0.8)).prop_map(|(x, y, visible)| Joint { x, y, visible })
}

fn keypoints() -> impl Strategy<Value = KeypointSet> {
    prop::collection::vec(joint(), NUM_JOINTS).prop_map(|j| KeypointSet::new(&j).unwrap())
}

fn schema() -> impl Strategy<Value = LimbSchema> {
    (1u32..4, 0u32..3).prop_map(|(t, r)| LimbSchema::coco(t, r))
}

fn key(c: [f32; 3]) -> [u32; 3] {
    c.map(f32::to_bits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rasterization_is_pure(kp in keypoints(), s in schema(), w in 8usize..24) {
        let a = rasterize_pose(&kp, &s, (2 * w, w)).unwrap();
        let b = rasterize_pose(&kp, &s, (2 * w, w)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pixels_are_background_or_schema_colours(kp in keypoints(), s in schema()) {
        let img = rasterize_pose(&kp, &s, (32, 16)).unwrap();
        let mut allowed: BTreeSet<[u32; 3]> = s.limbs.iter().map(|l| key(to_signed(l.color))).collect();
        allowed.insert(key(to_signed(s.joint_color)));
        allowed.insert(key([-1.0; 3]));
        for p in img.pixels() {
            prop_assert!(allowed.contains(&key(p)), "unexpected colour {:?}", p);
        }
    }

    #[test]
    fn hiding_an_endpoint_removes_the_limb(kp in keypoints(), limb in 0usize..17) {
        // no joint discs so only limbs paint
        let s = LimbSchema::coco(2, 0);
        let mut joints = kp.joints().to_vec();
        joints[s.limbs[limb].a].visible = false;
        let hidden = KeypointSet::new(&joints).unwrap();
        let img = rasterize_pose(&hidden, &s, (32, 16)).unwrap();
        // the only limbs left are those not touching the hidden joint
        let mut only: LimbSchema = s.clone();
        only.limbs.retain(|l| l.a != s.limbs[limb].a && l.b != s.limbs[limb].a);
        prop_assert_eq!(img, rasterize_pose(&kp, &only, (32, 16)).unwrap());
    }

    #[test]
    fn keypoint_records_round_trip(kp in keypoints()) {
        let line = format_keypoints("0001_0_000", &kp);
        let (id, back) = parse_keypoints(&line).unwrap();
        prop_assert_eq!(id, "0001_0_000");
        // invisible joints keep no coordinates
        for (a, b) in kp.joints().iter().zip(back.joints()) {
            prop_assert_eq!(a.visible, b.visible);
            if a.visible {
                prop_assert_eq!((a.x, a.y), (b.x, b.y));
            }
        }
    }

    #[test]
    fn visible_joints_stay_in_unit_square(kp in keypoints()) {
        for j in kp.joints().iter().filter(|j| j.visible) {
            prop_assert!((0.0..=1.0).contains(&j.x) && (0.0..=1.0).contains(&j.y));
        }
    }
}
