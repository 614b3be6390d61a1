use bsim_core::policy::{select_thompson, select_ucb};
use bsim_core::posterior::ScoreSamples;
use bsim_core::rng::rng_from;
use rand_distr::{Beta, Distribution};

/// P(X > Y) = ∫ f_X(x) F_Y(x) dx by composite Simpson's rule.
fn prob_first_larger(pdf_x: impl Fn(f64) -> f64, cdf_y: impl Fn(f64) -> f64) -> f64 {
    let n = 2000;
    let h = 1.0 / n as f64;
    let f = |x: f64| pdf_x(x) * cdf_y(x);
    let inner: f64 = (1..n)
        .map(|i| if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h))
        .sum();
    (f(0.0) + inner + f(1.0)) * h / 3.0
}

#[test]
fn thompson_choice_frequency_matches_beta_integral() {
    // Beta(2,1) has density 2x; Beta(1,2) has cdf 1 - (1-y)^2.
    let expected = prob_first_larger(|x| 2.0 * x, |y| 1.0 - (1.0 - y).powi(2));
    assert!((expected - 5.0 / 6.0).abs() < 1e-9);

    let (x, y) = (Beta::new(2.0, 1.0).unwrap(), Beta::new(1.0, 2.0).unwrap());
    let mut rng = rng_from(3, &[]);
    let draws = 100_000;
    let mut first = 0;
    for _ in 0..draws {
        let s = ScoreSamples::from_rows(vec![vec![x.sample(&mut rng)], vec![y.sample(&mut rng)]]).unwrap();
        if select_thompson(&s, 1, &[0, 1]).unwrap() == [0] {
            first += 1;
        }
    }
    let freq = first as f64 / draws as f64;
    assert!((freq - expected).abs() < 0.01, "freq {freq} vs {expected}");
}

#[test]
fn ucb_is_greedy_on_order_statistic_not_mean() {
    let tight = vec![0.5; 10];
    let wide: Vec<f64> = (0..10).map(|i| if i == 0 { 0.95 } else { 0.05 }).collect();
    let s = ScoreSamples::from_rows(vec![tight, wide]).unwrap();
    assert_eq!(select_ucb(&s, 1, 1, &[0, 1]).unwrap(), [1]);
    assert_eq!(select_ucb(&s, 2, 1, &[0, 1]).unwrap(), [0]);
}
