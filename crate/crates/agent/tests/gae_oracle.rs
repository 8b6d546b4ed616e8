use proptest::prelude::*;
use sfc_agent::gae::compute_gae;

/// Straight transcription of the recursion, evaluated front to back.
fn recursive_advantage(t: usize, r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> f64 {
    let live = if d[t] { 0.0 } else { 1.0 };
    let next_v = if t + 1 < r.len() { v[t + 1] } else { boot };
    let delta = r[t] + g * next_v * live - v[t];
    let rest = if t + 1 < r.len() { recursive_advantage(t + 1, r, v, d, boot, g, l) } else { 0.0 };
    delta + g * l * live * rest
}

/// Explicit discounted sum of TD errors up to the first done.
fn summed_advantage(t: usize, r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> f64 {
    let mut total = 0.0;
    let mut w = 1.0;
    for k in t..r.len() {
        let live = if d[k] { 0.0 } else { 1.0 };
        let next_v = if k + 1 < r.len() { v[k + 1] } else { boot };
        total += w * (r[k] + g * next_v * live - v[k]);
        if d[k] {
            break;
        }
        w *= g * l;
    }
    total
}

fn sequences() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, f64, f64, f64)> {
    (1usize..=32).prop_flat_map(|n| {
        (
            prop::collection::vec(-500.0..200.0f64, n),
            prop::collection::vec(-50.0..50.0f64, n),
            prop::collection::vec(prop::bool::weighted(0.15), n),
            -50.0..50.0f64,
            0.0..=1.0f64,
            0.0..=1.0f64,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_recursive_oracle_exactly((r, v, d, boot, g, l) in sequences()) {
        let (adv, ret) = compute_gae(&r, &v, &d, boot, g, l);
        for t in 0..r.len() {
            prop_assert_eq!(adv[t], recursive_advantage(t, &r, &v, &d, boot, g, l));
            prop_assert_eq!(ret[t], adv[t] + v[t]);
            let s = summed_advantage(t, &r, &v, &d, boot, g, l);
            prop_assert!((adv[t] - s).abs() <= 1e-9 * (1.0 + s.abs()));
        }
    }
}

#[test]
fn two_step_reference() {
    let (a, ret) = compute_gae(&[1.0, 1.0], &[0.5, 0.5], &[false, false], 0.0, 0.9, 0.8);
    assert!((a[0] - 1.31).abs() < 1e-12);
    assert!((a[1] - 0.5).abs() < 1e-12);
    assert!((ret[0] - 1.81).abs() < 1e-12);
}
