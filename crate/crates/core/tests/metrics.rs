use proptest::prelude::*;
use speedlab_core::flowmodel::{simulate_transfer, LinkModel};
use speedlab_core::metrics::{
    estimate_throughput, interval_rates, jitter, loss_rate, EstimationMethod,
};
use speedlab_core::trace::{Sample, ThroughputTrace, TraceSource};

/// Trace whose one-second intervals run at the given rates.
fn trace_from_mbps(mbps: &[f64]) -> ThroughputTrace {
    let mut samples = vec![Sample(0.0, 0.0)];
    let mut bytes = 0.0;
    for (i, m) in mbps.iter().enumerate() {
        bytes += m * 1e6 / 8.0;
        samples.push(Sample(1000.0 * (i + 1) as f64, bytes));
    }
    ThroughputTrace::new(1000.0, TraceSource::Measured, None, samples).unwrap()
}

fn est(trace: &ThroughputTrace, m: EstimationMethod) -> f64 {
    estimate_throughput(trace, &m).unwrap()
}

#[test]
fn worked_trace_is_exact() {
    let t = trace_from_mbps(&[10.0, 50.0, 90.0, 100.0, 100.0, 100.0]);
    assert_eq!(est(&t, EstimationMethod::FullAverage), 75e6);
    assert_eq!(est(&t, EstimationMethod::steady_state()), 97.5e6);
    assert_eq!(est(&t, EstimationMethod::Median), 95e6);
    assert_eq!(est(&t, EstimationMethod::Peak), 100e6);
}

#[test]
fn constant_trace_gives_same_answer_everywhere() {
    let t = trace_from_mbps(&[42.0; 9]);
    for m in EstimationMethod::all_defaults() {
        assert_eq!(est(&t, m), 42e6, "{m}");
    }
}

#[test]
fn simulated_rates_match_capacity_in_steady_state() {
    let l = LinkModel::new(200e6, 20.0, 0.0).unwrap();
    let t = simulate_transfer(&l, 4, 10.0, 100.0).unwrap();
    let rates = interval_rates(&t).unwrap();
    assert_eq!(rates.len(), 100);
    for r in &rates[50..] {
        assert!((r.bps - 200e6).abs() <= 0.01 * 200e6);
    }
}

#[test]
fn steady_state_weights_irregular_intervals_by_duration() {
    // 100 Mbps for 3 s then 80 Mbps for 1 s, sampled unevenly.
    let samples = vec![
        Sample(0.0, 0.0),
        Sample(500.0, 6.25e6),
        Sample(3000.0, 37.5e6),
        Sample(4000.0, 47.5e6),
    ];
    let t = ThroughputTrace::new(1000.0, TraceSource::Measured, None, samples).unwrap();
    assert_eq!(est(&t, EstimationMethod::steady_state()), 95e6);
}

fn corpus(loss: impl Strategy<Value = f64>) -> impl Strategy<Value = ThroughputTrace> {
    (1.0f64..1500.0, 5.0f64..120.0, loss, 1u16..9, 2.0f64..12.0)
        .prop_map(|(mbps, rtt, loss, n, secs)| {
            let l = LinkModel::new(mbps * 1e6, rtt, loss).unwrap();
            simulate_transfer(&l, n, secs, 100.0).unwrap()
        })
}

fn arb_rates() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1000.0, 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // Loss-free transfers ramp up through slow start and then hold, so the
    // slow start can only drag the full average down.
    #[test]
    fn slow_start_biases_full_average_low(t in corpus(Just(0.0))) {
        let full = est(&t, EstimationMethod::FullAverage);
        let steady = est(&t, EstimationMethod::steady_state());
        prop_assert!(full <= steady * (1.0 + 1e-9));
    }

    #[test]
    fn nothing_exceeds_peak(t in corpus(0.0f64..0.03)) {
        let peak = est(&t, EstimationMethod::Peak);
        let slack = 1e-9 * peak;
        for m in EstimationMethod::all_defaults() {
            prop_assert!(est(&t, m) <= peak + slack, "{}", m);
        }
    }

    #[test]
    fn untrimmed_is_plain_mean(mbps in arb_rates()) {
        let t = trace_from_mbps(&mbps);
        let mean = interval_rates(&t).unwrap().iter().map(|r| r.bps).sum::<f64>() / mbps.len() as f64;
        let got = est(&t, EstimationMethod::Trimmed { low: 0.0, high: 0.0 });
        prop_assert!((got - mean).abs() <= 1e-9 * mean.max(1.0));
    }

    #[test]
    fn estimators_scale_with_bytes(mbps in arb_rates(), c in 0.01f64..100.0) {
        let t = trace_from_mbps(&mbps);
        let scaled = t.scaled(c);
        for m in EstimationMethod::all_defaults() {
            let a = est(&t, m) * c;
            let b = est(&scaled, m);
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{}: {} vs {}", m, a, b);
        }
    }

    #[test]
    fn jitter_ignores_constant_offset(rtts in prop::collection::vec(0.1f64..500.0, 2..50), shift in 0.0f64..1000.0) {
        let shifted: Vec<f64> = rtts.iter().map(|r| r + shift).collect();
        let a = jitter(&rtts).unwrap();
        let b = jitter(&shifted).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + shift));
    }

    #[test]
    fn loss_and_delivery_fractions_sum_to_one(sent in 1u64..1_000_000, frac in 0.0f64..=1.0) {
        let received = (sent as f64 * frac) as u64;
        let loss = loss_rate(sent, received).unwrap();
        prop_assert_eq!(loss + received as f64 / sent as f64, 1.0);
    }
}
