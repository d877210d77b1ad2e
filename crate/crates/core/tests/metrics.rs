use micropatch::archzoo::{ArchKind, Model, ModelSpec};
use micropatch::metrics::{confusion, macro_scores, time_inference, ConfusionMatrix, TimingReport};
use micropatch::tensor::{Tape, Tensor};
use proptest::prelude::*;

/// Precision, recall and F1 straight from the definitions.
fn oracle(cm: &[Vec<u64>]) -> (Vec<f64>, f64) {
    let c = cm.len();
    let f1: Vec<f64> = (0..c)
        .map(|k| {
            let tp = cm[k][k] as f64;
            let col: u64 = (0..c).map(|r| cm[r][k]).sum();
            let row: u64 = cm[k].iter().sum();
            let p = if col == 0 { 0.0 } else { tp / col as f64 };
            let r = if row == 0 { 0.0 } else { tp / row as f64 };
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect();
    let m = f1.iter().sum::<f64>() / c as f64;
    (f1, m)
}

fn matrix(rows: &[Vec<u64>]) -> ConfusionMatrix {
    ConfusionMatrix::from_counts(rows.len(), rows.concat()).unwrap()
}

#[test]
fn three_class_hand_matrix() {
    let rows = vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 0, 2]];
    let r = macro_scores(&matrix(&rows)).unwrap();
    let (f1, m) = oracle(&rows);
    for (a, b) in r.f1.iter().zip(&f1) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((r.macro_f1 - (0.8 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
    assert!((r.macro_f1 - m).abs() < 1e-12);
    assert!((r.accuracy - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn out_of_range_label_is_rejected() {
    assert!(confusion(&[0, 3], &[0, 1], 3).is_err());
    assert!(confusion(&[0], &[0, 1], 3).is_err());
}

#[test]
fn uniform_random_predictions_sit_at_chance() {
    let c = 8;
    let truth: Vec<usize> = (0..8000).map(|i| i % c).collect();
    let pred: Vec<usize> = (0..8000u64).map(|i| (i.wrapping_mul(2654435761) >> 7) as usize % c).collect();
    let r = macro_scores(&confusion(&truth, &pred, c).unwrap()).unwrap();
    assert!((r.accuracy - 1.0 / c as f64).abs() < 0.02, "{}", r.accuracy);
}

fn counts(c: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..20, c), c)
}

proptest! {
    #[test]
    fn relabeling_does_not_change_macro_scores(rows in counts(5), perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let cm = matrix(&rows);
        prop_assume!(cm.total() > 0);
        let a = macro_scores(&cm).unwrap();
        let b = macro_scores(&cm.relabeled(&perm)).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert!((a.macro_precision - b.macro_precision).abs() < 1e-12);
        prop_assert!((a.macro_recall - b.macro_recall).abs() < 1e-12);
        prop_assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn scores_match_definitions_and_stay_in_unit_interval(rows in counts(4)) {
        let cm = matrix(&rows);
        prop_assume!(cm.total() > 0);
        let r = macro_scores(&cm).unwrap();
        let (f1, m) = oracle(&rows);
        prop_assert!((r.macro_f1 - m).abs() < 1e-12);
        for k in 0..4 {
            prop_assert!((r.f1[k] - f1[k]).abs() < 1e-12);
            let (p, rc) = (r.precision[k], r.recall[k]);
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&rc));
            if p > 0.0 && rc > 0.0 {
                prop_assert!(r.f1[k] >= p.min(rc) - 1e-12 && r.f1[k] <= p.max(rc) + 1e-12);
            }
        }
        // Accuracy is the support-weighted mean of recall.
        let total = cm.total() as f64;
        let weighted: f64 = (0..4).map(|k| r.recall[k] * r.support[k] as f64 / total).sum();
        prop_assert!((weighted - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn balanced_support_makes_macro_recall_equal_accuracy(raw in counts(3), n in 1u64..15) {
        // Rescale each row to the same support by moving the remainder onto the diagonal.
        let rows: Vec<Vec<u64>> = raw
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let mut r: Vec<u64> = row.iter().map(|v| v % (n + 1)).collect();
                while r.iter().sum::<u64>() > n {
                    let j = r.iter().position(|&v| v > 0).unwrap();
                    r[j] -= 1;
                }
                r[k] += n - r.iter().sum::<u64>();
                r
            })
            .collect();
        let r = macro_scores(&matrix(&rows)).unwrap();
        prop_assert!((r.macro_recall - r.accuracy).abs() < 1e-12);
    }
}

#[test]
fn timing_mean_is_the_mean_of_the_runs() {
    let runs = vec![1.0, 2.0, 4.0, 9.0];
    let t = TimingReport::from_runs(20, runs.clone());
    assert_eq!(t.mean_ms, runs.iter().sum::<f64>() / 4.0);
    assert_eq!(t.median_ms, 3.0);
    assert_eq!(t.runs_ms, runs);
}

fn macs(spec: &ModelSpec) -> u64 {
    let m = Model::<f32>::build(spec.clone()).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 3, 40, 40]));
    m.forward(&mut tape, x).unwrap();
    tape.macs()
}

#[test]
fn vit_is_faster_than_a_model_with_five_times_its_flops() {
    let vit = ModelSpec::new(ArchKind::CustomViT, 16, 0);
    // No zoo member is 5x heavier, so stack more encoder layers.
    let mut deep = vit.clone();
    deep.overrides.vit_depth = Some(36);
    assert!(macs(&deep) >= 5 * macs(&vit));
    let time = |s: &ModelSpec| {
        let m = Model::<f32>::build(s.clone()).unwrap();
        let t = time_inference(&m, 3, 15).unwrap();
        assert_eq!(t.runs_ms.len(), 15);
        t.median_ms
    };
    let (fast, slow) = (time(&vit), time(&deep));
    assert!(fast < slow, "ViT {fast:.3} ms vs {slow:.3} ms");
}
