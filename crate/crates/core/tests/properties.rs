use std::path::Path;

use iperceive::harness::config::TrainConfig;
use iperceive::harness::dvc::{batch_indices, frame_span};
use iperceive::harness::features::{decode_features, encode_features};
use iperceive::proposal::{nms, temporal_iou, EventProposal};
use iperceive::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn feature_files_round_trip_f32_values(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| (((seed >> (i % 48)) & 0xffff) as f32 / 97.0 - 300.0) as f64)
            .collect();
        let t = Tensor::from_vec(rows, cols, data);
        let back = decode_features(&encode_features(&t), Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn config_round_trips_through_toml(seed in any::<u64>(), steps in 1usize..5000, lr in 1e-6f64..1.0, cs in any::<bool>(), e2e in any::<bool>()) {
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.dvc.steps = steps;
        cfg.qa.lr = lr;
        cfg.flags.common_sense = cs;
        cfg.flags.end_to_end = e2e;
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn each_epoch_visits_every_item_once(seed in any::<u64>(), items in 1usize..30, batch in 1usize..8, epoch in 0usize..4) {
        let per_epoch = items.div_ceil(batch.min(items));
        let mut seen: Vec<usize> = (epoch * per_epoch..(epoch + 1) * per_epoch)
            .flat_map(|s| batch_indices(seed, s, items, batch))
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..items).collect::<Vec<_>>());
    }

    #[test]
    fn frame_span_stays_inside_the_video(frames in 1usize..40, a in 0.0f64..50.0, len in 0.01f64..20.0) {
        let (first, count) = frame_span(frames, 1.0, a, a + len);
        prop_assert!(count >= 1 && first + count <= frames);
    }

    #[test]
    fn nms_leaves_no_overlap_above_threshold(
        raw in proptest::collection::vec((0.0f64..20.0, 0.1f64..8.0, 0.0f64..1.0), 0..12),
        thr in 0.1f64..0.9,
    ) {
        let props: Vec<EventProposal> = raw
            .iter()
            .enumerate()
            .map(|(i, &(s, l, c))| EventProposal::new(s, s + l, c, i))
            .collect();
        let kept = nms(props, thr);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(temporal_iou(a.interval(), b.interval()) <= thr);
            }
        }
        prop_assert!(kept.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }
}
