mod common;

use chrono::{TimeZone, Utc};
use common::oracle::{auc_instance, pairwise_auc};
use common::rng;
use edgevad::eval::{evaluate, roc_auc, roc_curve, video_verdict, Labels, Unit, VerdictRule};
use edgevad::pipeline::{alert_check, ScoreRecord, StageLatency};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn auc_equals_the_pairwise_oracle_on_500_instances() {
    let mut r = rng(60);
    for case in 0..500 {
        let (s, l) = auc_instance(&mut r);
        assert_eq!(roc_auc(&s, &l).unwrap(), pairwise_auc(&s, &l), "case {case}");
    }
}

#[test]
fn auc_examples() {
    assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(
        roc_auc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(),
        0.5
    );
    assert!(roc_auc(&[0.2, 0.3], &[true, true]).is_err());
    assert!(roc_auc(&[0.2], &[true, false]).is_err());
}

#[test]
fn roc_curve_area_matches_auc() {
    let mut r = rng(61);
    for _ in 0..100 {
        let (s, l) = auc_instance(&mut r);
        let pts = roc_curve(&s, &l).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        // Trapezoids over the tie-merged steps give the Mann–Whitney value.
        let area: f64 = pts
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum();
        assert!((area - roc_auc(&s, &l).unwrap()).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps(seed in 0u64..10_000, a in 0.1f64..10.0, b in -5.0f64..5.0, p in 1u32..4) {
        let (s, l) = auc_instance(&mut rng(seed));
        let base = roc_auc(&s, &l).unwrap();
        // Grid scores are at least 1e-3 apart, so these maps keep order and ties exactly.
        let maps: [&dyn Fn(f64) -> f64; 4] = [&|x| a * x + b, &|x| x.powi(2 * p as i32 + 1), &|x| x.exp(), &|x| (x + 0.5).ln()];
        for f in maps {
            let t: Vec<f64> = s.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(roc_auc(&t, &l).unwrap(), base);
        }
    }

    #[test]
    fn reversing_untied_scores_complements_the_auc(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let n = r.random_range(2..100);
        let mut s: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        for i in (1..n).rev() {
            s.swap(i, r.random_range(0..=i));
        }
        let mut l: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        l[0] = !l[1];
        let flipped: Vec<f64> = s.iter().map(|x| 1.0 - x).collect();
        let sum = roc_auc(&s, &l).unwrap() + roc_auc(&flipped, &l).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn any_alert_is_monotone_in_scores(scores in prop::collection::vec(0.0f32..1.0, 1..40), bumps in prop::collection::vec(0.0f32..0.5, 40)) {
        let low = records(&scores);
        let raised: Vec<f32> = scores.iter().zip(&bumps).map(|(s, b)| (s + b).min(1.0)).collect();
        let high = records(&raised);
        if video_verdict(&low, VerdictRule::AnyAlert) {
            prop_assert!(video_verdict(&high, VerdictRule::AnyAlert));
        }
    }
}

fn records(scores: &[f32]) -> Vec<ScoreRecord> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &score)| ScoreRecord {
            source: "v".into(),
            snippet_index: i,
            start_frame: 16 * i,
            end_frame: 16 * i + 16,
            score,
            alert: alert_check(score, 0.7),
            latency: StageLatency::default(),
            timestamp: Utc.timestamp_opt(0, 0).unwrap(),
        })
        .collect()
}

#[test]
fn verdict_examples() {
    assert!(!video_verdict(&records(&[0.0; 8]), VerdictRule::AnyAlert));
    let one = records(&[0.1, 0.2, 0.71, 0.3]);
    assert!(video_verdict(&one, VerdictRule::AnyAlert));
    assert!(!video_verdict(&one, VerdictRule::Run(2)));
    assert!(video_verdict(&records(&[0.1, 0.8, 0.9, 0.2]), VerdictRule::Run(2)));
    assert!(!video_verdict(&records(&[0.7, 0.7]), VerdictRule::AnyAlert));
    assert_eq!("run-3".parse::<VerdictRule>().unwrap(), VerdictRule::Run(3));
    assert!("run-0".parse::<VerdictRule>().is_err());
}

#[test]
fn evaluate_counts_videos_and_scores_both_units() {
    let labels = Labels::parse_csv("source,start_frame,end_frame\nA,32,64\nB,,\n").unwrap();
    let mut recs = records(&[0.1, 0.2, 0.9, 0.95, 0.3]);
    let mut normal = records(&[0.1, 0.75, 0.2, 0.1, 0.05]);
    recs.iter_mut().for_each(|r| r.source = "A".into());
    normal.iter_mut().for_each(|r| r.source = "B".into());
    let all: Vec<ScoreRecord> = recs.into_iter().chain(normal).collect();

    let m = evaluate(&all, &labels, Unit::Snippet, VerdictRule::AnyAlert).unwrap();
    assert_eq!((m.positives, m.negatives), (2, 8));
    // Positives 0.9 and 0.95 outrank every negative.
    assert_eq!(m.auc, Some(1.0));
    assert_eq!(
        (m.abnormal_videos, m.detected_abnormal, m.normal_videos, m.false_alarms),
        (1, 1, 1, 1)
    );

    let f = evaluate(&all, &labels, Unit::Frame, VerdictRule::AnyAlert).unwrap();
    assert_eq!((f.positives, f.negatives), (32, 128));
    assert_eq!(f.auc, Some(1.0));

    let unknown = Labels::parse_csv("source,start_frame,end_frame\nA,32,64\n").unwrap();
    assert!(evaluate(&all, &unknown, Unit::Snippet, VerdictRule::AnyAlert).is_err());
}
