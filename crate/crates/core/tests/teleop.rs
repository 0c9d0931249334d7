use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rcmsim_core::teleop::{MasterSample, MovingAverage, TeleopConfig, TeleopPipeline};
use rcmsim_core::Pose;

const N: usize = 50;
const FS: f64 = 1000.0;

fn filtered_sine(f: f64, samples: usize) -> Vec<f64> {
    let mut filter = MovingAverage::new(N, Vector3::zeros());
    (0..samples)
        .map(|k| {
            filter
                .step(Vector3::new((2.0 * PI * f * k as f64 / FS).sin(), 0.0, 0.0))
                .x
        })
        .collect()
}

/// Amplitude at frequency `f` by a direct DFT over a whole number of periods.
fn dft_amplitude(y: &[f64], f: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (k, v) in y.iter().enumerate() {
        let w = 2.0 * PI * f * k as f64 / FS;
        re += v * w.cos();
        im += v * w.sin();
    }
    2.0 * re.hypot(im) / y.len() as f64
}

#[test]
fn twenty_hertz_is_in_the_filter_null() {
    let y = filtered_sine(20.0, 3000);
    let steady = &y[1000..];
    assert!(dft_amplitude(steady, 20.0) < 1e-9);
    assert!(steady.iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn ten_hertz_gain_matches_boxcar_response() {
    let y = filtered_sine(10.0, 3000);
    let gain = dft_amplitude(&y[1000..], 10.0);
    let x = PI * 10.0 / FS;
    let expected = (x * N as f64).sin() / (N as f64 * x.sin());
    assert!((gain - expected).abs() < 1e-6, "{gain} vs {expected}");
    assert!((expected - 0.6367).abs() < 1e-4);
}

#[test]
fn step_reaches_half_after_ceil_half_window() {
    let mut filter = MovingAverage::new(N, Vector3::zeros());
    let out: Vec<f64> = (0..N)
        .map(|_| filter.step(Vector3::new(1.0, 0.0, 0.0)).x)
        .collect();
    let first = out.iter().position(|v| *v >= 0.5 - 1e-12).unwrap() + 1;
    assert_eq!(first, N.div_ceil(2));
}

fn sample(t: f64, position: Vector3<f64>, engaged: bool) -> MasterSample {
    MasterSample {
        t,
        position,
        orientation: UnitQuaternion::identity(),
        clutch_engaged: engaged,
        contact_press: false,
    }
}

fn pipeline() -> TeleopPipeline {
    TeleopPipeline::new(
        TeleopConfig::default(),
        &sample(0.0, Vector3::zeros(), true),
        Pose::new(Vector3::new(10.0, 20.0, 30.0), UnitQuaternion::identity()),
    )
    .unwrap()
}

#[test]
fn fifty_mm_of_hand_is_ten_mm_of_tip() {
    let mut p = pipeline();
    let start = p.clutch().last_target().position;
    let mut last = start;
    for k in 1..=2000 {
        let s = (k as f64 / 1000.0).min(1.0);
        last = p
            .step(&sample(
                k as f64 / FS,
                Vector3::new(50.0 * s, 0.0, 0.0),
                true,
            ))
            .position;
    }
    let d = last - start;
    assert!((d.x - 10.0).abs() < 1e-9 && d.y.abs() < 1e-12 && d.z.abs() < 1e-12);
}

#[test]
fn reengage_sequence_has_no_jump() {
    let mut p = pipeline();
    let mut prev = p.clutch().last_target().position;
    let mut max_jump: f64 = 0.0;
    let mut held = None;
    let mut hand = Vector3::zeros();
    for k in 1..=3000 {
        let engaged = !(1000..2000).contains(&k);
        hand += Vector3::new(0.02, -0.01, 0.005);
        let target = p.step(&sample(k as f64 / FS, hand, engaged)).position;
        if !engaged {
            let h = *held.get_or_insert(target);
            assert_eq!(target, h);
        }
        // Hand speed bounds the per-tick change when engaged.
        max_jump = max_jump.max((target - prev).norm());
        prev = target;
    }
    assert!(max_jump <= Vector3::new(0.02, -0.01, 0.005).norm() / 5.0 + 1e-12);
}

proptest! {
    #[test]
    fn filter_is_linear(
        xs in proptest::collection::vec(-100.0f64..100.0, 120),
        ys in proptest::collection::vec(-100.0f64..100.0, 120),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut fx = MovingAverage::new(N, Vector3::zeros());
        let mut fy = MovingAverage::new(N, Vector3::zeros());
        let mut fz = MovingAverage::new(N, Vector3::zeros());
        for (x, y) in xs.iter().zip(&ys) {
            let ox = fx.step(Vector3::repeat(*x));
            let oy = fy.step(Vector3::repeat(*y));
            let oz = fz.step(Vector3::repeat(a * x + b * y));
            prop_assert!((oz - (ox * a + oy * b)).amax() < 1e-12);
        }
    }

    #[test]
    fn engaged_slave_motion_is_master_motion_over_scale(
        steps in proptest::collection::vec(proptest::array::uniform3(-2.0f64..2.0), 10..200),
    ) {
        let mut p = pipeline();
        let mut filter = MovingAverage::new(N, Vector3::zeros());
        let start = p.clutch().last_target().position;
        let mut hand = Vector3::zeros();
        for (k, d) in steps.iter().enumerate() {
            hand += Vector3::from(*d);
            let filtered = filter.step(hand);
            let slave = p.step(&sample((k + 1) as f64 / FS, hand, true)).position;
            let lhs = (slave - start) * 5.0;
            prop_assert!((lhs - filtered).amax() < 1e-12 * (1.0 + filtered.amax()));
        }
    }

    #[test]
    fn disengaged_target_never_moves(
        script in proptest::collection::vec((proptest::array::uniform3(-5.0f64..5.0), any::<bool>()), 1..300),
    ) {
        let mut p = pipeline();
        let mut hand = Vector3::zeros();
        let mut prev = p.clutch().last_target();
        for (k, (d, engaged)) in script.iter().enumerate() {
            hand += Vector3::from(*d);
            let target = p.step(&sample((k + 1) as f64 / FS, hand, *engaged));
            if !engaged {
                prop_assert_eq!(target, prev);
            }
            prev = target;
        }
    }
}
