use proptest::prelude::*;
use terraseg::data::{d8_receivers, flow_accumulation_d8, imbalance_stats, Raster};
use terraseg::metrics::{confusion, segmentation_metrics, BinaryMask};
use terraseg::tensor::Conv2dGeometry;
use terraseg::train::{bce_loss, focal_loss};
use terraseg::{Tape, Tensor};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_follows_the_shape_law(
        h in 1usize..20, w in 1usize..20, k in 1usize..5,
        s in 1usize..4, p in 0usize..4, d in 1usize..4,
    ) {
        let x = Tensor::<f64>::ones(&[2, h, w]);
        let wt = Tensor::<f64>::ones(&[3, 2, k, k]);
        let t = Tape::inference();
        let out = t.constant(x).conv2d(&t.constant(wt), None, Conv2dGeometry::new(s, p, d));
        let span = d * (k - 1) + 1;
        let padded = [h + 2 * p, w + 2 * p];
        if padded[0] < span || padded[1] < span {
            prop_assert!(out.is_err());
        } else {
            let ext = |n: usize| (n - span) / s + 1;
            let expect = [3, ext(padded[0]), ext(padded[1])];
            let out = out.unwrap();
            prop_assert_eq!(out.shape(), &expect[..]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1..4.0f64, seed in values(64)) {
        let x = Tensor::from_fn(&[rows, cols], |i| seed[i % seed.len()] * 10.0);
        let t = Tape::inference();
        let y = t.constant(x).softmax_scaled(scale).unwrap();
        for r in y.value().data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn reshape_and_permute_round_trip(a in 1usize..5, b in 1usize..5, c in 1usize..5, vals in values(64)) {
        let x = Tensor::from_fn(&[a, b, c], |i| vals[i % vals.len()] + i as f64);
        let t = Tape::inference();
        let v = t.constant(x.clone());
        let back = v.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(back.value(), &x);
        let flat = v.reshape(&[a * b * c]).unwrap().reshape(&[a, b, c]).unwrap();
        prop_assert_eq!(flat.value(), &x);
    }

    #[test]
    fn metrics_match_set_definitions(h in 1usize..8, w in 1usize..8, bits in prop::collection::vec(any::<(bool, bool)>(), 64)) {
        let n = h * w;
        let pred: Vec<bool> = bits[..n].iter().map(|b| b.0).collect();
        let truth: Vec<bool> = bits[..n].iter().map(|b| b.1).collect();
        let c = confusion(
            &BinaryMask::new(h, w, pred.clone()).unwrap(),
            &BinaryMask::new(h, w, truth.clone()).unwrap(),
        ).unwrap();
        let r = segmentation_metrics(&[c]).unwrap();
        let inter = (0..n).filter(|&i| pred[i] && truth[i]).count() as f64;
        let union = (0..n).filter(|&i| pred[i] || truth[i]).count() as f64;
        let sizes = (pred.iter().filter(|&&p| p).count() + truth.iter().filter(|&&t| t).count()) as f64;
        let agree = (0..n).filter(|&i| pred[i] == truth[i]).count() as f64;
        prop_assert!((r.mean_accuracy - agree / n as f64).abs() < 1e-12);
        let iou = if union == 0.0 { 1.0 } else { inter / union };
        let dice = if sizes == 0.0 { 1.0 } else { 2.0 * inter / sizes };
        prop_assert!((r.mean_iou - iou).abs() < 1e-12);
        prop_assert!((r.mean_dice - dice).abs() < 1e-12);
        prop_assert!(r.mean_iou <= r.mean_dice + 1e-12);
    }

    #[test]
    fn imbalance_ratio_is_background_over_foreground(masks in prop::collection::vec(prop::collection::vec(0u8..2, 1..50), 1..6)) {
        let with_fg: Vec<&Vec<u8>> = masks.iter().filter(|m| m.iter().any(|&v| v != 0)).collect();
        match imbalance_stats(&masks) {
            Err(_) => prop_assert!(with_fg.is_empty()),
            Ok(s) => {
                prop_assert_eq!(s.ratios.len(), with_fg.len());
                prop_assert_eq!(s.empty.len(), masks.len() - with_fg.len());
                for (r, m) in s.ratios.iter().zip(&with_fg) {
                    let fg = m.iter().filter(|&&v| v == 1).count() as f64;
                    prop_assert!((r * fg - (m.len() as f64 - fg)).abs() < 1e-9);
                }
                prop_assert!(s.min <= s.median && s.median <= s.max);
                prop_assert!(s.min <= s.mean && s.mean <= s.max);
            }
        }
    }

    #[test]
    fn flow_accumulation_counts_upstream_paths(h in 1usize..9, w in 1usize..9, z in prop::collection::vec(0.0..100.0f64, 64)) {
        let dem = Raster::new(h, w, z[..h * w].to_vec());
        let recv = d8_receivers(&dem);
        let acc = flow_accumulation_d8(&dem);
        let mut expect = vec![0u32; h * w];
        for start in 0..h * w {
            let mut at = Some(start);
            let mut steps = 0;
            while let Some(i) = at {
                expect[i] += 1;
                at = recv[i];
                steps += 1;
                prop_assert!(steps <= h * w, "receiver cycle");
            }
        }
        prop_assert_eq!(acc, expect);
    }

    #[test]
    fn balanced_focal_without_focusing_is_half_bce(logits in values(16), ys in prop::collection::vec(0u8..2, 16)) {
        let y = Tensor::from_fn(&[16], |i| ys[i] as f64);
        let t = Tape::inference();
        let z = t.constant(Tensor::new(&[16], logits.clone()).unwrap());
        let bce = z.bce_with_logits(&y).unwrap().value().item();
        let focal = z.focal_with_logits(&y, 0.5, 0.0).unwrap().value().item();
        prop_assert!((focal - 0.5 * bce).abs() < 1e-12);

        let probs: Vec<f64> = logits.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let b = bce_loss(&probs, y.data()).unwrap();
        let f = focal_loss(&probs, y.data(), 0.5, 0.0).unwrap();
        prop_assert!((f - 0.5 * b).abs() < 1e-12);
        prop_assert!((b - bce).abs() < 1e-9);
    }
}
