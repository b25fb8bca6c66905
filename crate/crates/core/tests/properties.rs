use proptest::prelude::*;

use oxipipe_core::dsp::{self, DspConfig, N_STREAMS};
use oxipipe_core::frameio::{read_rvf, read_signal_csv, write_rvf, write_signal_csv, FrameSequence, SignalTable};
use oxipipe_core::harness;
use oxipipe_core::roi::{self, ColorSignal};
use oxipipe_core::ror;
use oxipipe_core::synth::{self, PhysioTrace, SubjectProfile, MELANIN_WEIGHTS};

fn sequence() -> impl Strategy<Value = FrameSequence> {
    (1u32..6, 1u32..6, 1usize..4, 1.0f32..240.0).prop_flat_map(|(w, h, n, fps)| {
        prop::collection::vec(prop::collection::vec(any::<[u8; 3]>(), (w * h) as usize), n)
            .prop_map(move |frames| FrameSequence::new(w, h, fps, frames).unwrap())
    })
}

fn table() -> impl Strategy<Value = SignalTable> {
    (1usize..40, any::<bool>(), any::<bool>()).prop_flat_map(|(n, with_spo2, with_cycle)| {
        (
            prop::collection::vec(prop::array::uniform3(0.0f64..255.0), n),
            prop::collection::vec(70.0f64..100.0, n),
            prop::collection::vec(0u32..2, n),
        )
            .prop_map(move |(rgb, spo2, steps)| {
                let mut k = 0;
                let cycle = steps
                    .iter()
                    .map(|s| {
                        k += s;
                        k
                    })
                    .collect();
                SignalTable {
                    time_s: (0..n).map(|i| i as f64 / 30.0).collect(),
                    rgb,
                    spo2: with_spo2.then_some(spo2),
                    cycle: with_cycle.then_some(cycle),
                }
            })
    })
}

proptest! {
    #[test]
    fn rvf_roundtrip(seq in sequence()) {
        let bytes = write_rvf(&seq);
        let back = read_rvf(&bytes).unwrap();
        prop_assert_eq!(write_rvf(&back), bytes);
        prop_assert_eq!(back, seq);
    }

    #[test]
    fn rvf_rejects_any_truncation(seq in sequence(), cut in 1usize..64) {
        let bytes = write_rvf(&seq);
        let cut = cut.min(bytes.len());
        prop_assert!(read_rvf(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn signal_csv_roundtrip(t in table()) {
        let text = write_signal_csv(&t);
        let back = read_signal_csv(&text).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(write_signal_csv(&back), text);
    }

    #[test]
    fn dataset_roundtrip(n in 300usize..420, stride in 1usize..40, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let samples: Vec<[f64; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| rand::Rng::random_range(&mut rng, 60.0..200.0)))
            .collect();
        let sig = ColorSignal::new(30.0, samples, Some(vec![97.0; n]), None).unwrap();
        let stack = dsp::StreamStack::build(&sig, &DspConfig::default()).unwrap();
        let ds = dsp::windows_from_stack(&stack, sig.spo2.as_deref(), 300, stride).unwrap();
        let manifest = ds.manifest();
        let json = serde_json::to_string(&manifest).unwrap();
        let mut blob = Vec::new();
        ds.write_blob(&mut blob).unwrap();
        prop_assert_eq!(blob.len(), ds.len() * 2 * N_STREAMS * 300 * 8);
        let back = dsp::WindowedDataset::from_parts(&serde_json::from_str(&json).unwrap(), &blob[..]).unwrap();
        prop_assert_eq!(back, ds);
        prop_assert!(dsp::WindowedDataset::from_parts(&manifest, &blob[..blob.len() - 8]).is_err());
    }

    #[test]
    fn window_count_formula(len in 1usize..2000, window in 1usize..400, stride in 1usize..50) {
        let got = dsp::window_starts(len, window, stride).count();
        let expected = if len < window { 0 } else { (len - window) / stride + 1 };
        prop_assert_eq!(got, expected);
        prop_assert!(dsp::window_starts(len, window, stride).all(|s| s + window <= len));
    }

    #[test]
    fn ror_prediction_is_monotone_and_clamped(a in 90.0f64..130.0, b in 5.0f64..50.0, r1 in 0.0f64..3.0, r2 in 0.0f64..3.0) {
        let cal = synth::CalibrationModel { a, b };
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let (p_lo, p_hi) = (ror::predict_ratio(&cal, lo), ror::predict_ratio(&cal, hi));
        prop_assert!(p_lo >= p_hi);
        prop_assert!((ror::SPO2_FLOOR..=ror::SPO2_CEIL).contains(&p_lo));
        prop_assert!((ror::SPO2_FLOOR..=ror::SPO2_CEIL).contains(&p_hi));
    }

    #[test]
    fn noiseless_ratio_follows_calibration(spo2 in 80.0f64..100.0, perfusion in 0.005f64..0.05, tone in 0.0f64..1.0) {
        let profile = SubjectProfile { noise_sigma: 0.0, perfusion, skin_tone: tone, ..Default::default() };
        let physio = PhysioTrace {
            spo2: synth::Spo2Trace::Constant { value: spo2 },
            ..Default::default()
        };
        let fm = synth::forward_model(&profile, &physio, 30.0).unwrap();
        let expected = profile.calibration.ratio_for(spo2);
        for i in (0..fm.pulse.len()).step_by(37) {
            prop_assert!((fm.ratio_of_ratios(i) - expected).abs() <= 1e-9);
        }
    }

    #[test]
    fn green_ac_is_independent_of_spo2(s1 in 70.0f64..100.0, s2 in 70.0f64..100.0) {
        let profile = SubjectProfile { noise_sigma: 0.0, ..Default::default() };
        let fm = |s| synth::forward_model(
            &profile,
            &PhysioTrace { spo2: synth::Spo2Trace::Constant { value: s }, ..Default::default() },
            30.0,
        ).unwrap();
        let (a, b) = (fm(s1), fm(s2));
        for i in (0..a.pulse.len()).step_by(13) {
            prop_assert_eq!(a.ac[i][1], b.ac[i][1]);
        }
    }

    #[test]
    fn melanin_darkens_every_channel(t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let dc = |t| SubjectProfile { skin_tone: t, ..Default::default() }.effective_dc();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (dark, light) = (dc(hi), dc(lo));
        for (c, k) in MELANIN_WEIGHTS.iter().enumerate() {
            prop_assert!(*k > 0.0);
            prop_assert!(dark[c] <= light[c]);
        }
    }

    #[test]
    fn synthetic_samples_stay_in_range(seed in any::<u64>(), sigma in 0.0f64..2.0) {
        let profile = SubjectProfile { noise_sigma: sigma, ..Default::default() };
        let s = synth::generate_color_signal(&profile, &PhysioTrace::default(), 30.0, seed).unwrap();
        prop_assert!(s.validate().is_ok());
        prop_assert!(s.samples.iter().flatten().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn largest_component_is_a_subset(bits in prop::collection::vec(any::<bool>(), 64)) {
        let kept = roi::largest_component(&bits, 8, 8);
        prop_assert!(kept.iter().zip(&bits).all(|(k, b)| !k || *b));
    }

    #[test]
    fn split_is_disjoint(b1 in 300usize..900, b2 in 300usize..900, b3 in 300usize..900, stride in 1usize..30) {
        let b = vec![0, b1, b1 + b2, b1 + b2 + b3];
        let len = b[3];
        let sig = ColorSignal::new(30.0, vec![[90.0; 3]; len], None, Some(b.clone())).unwrap();
        let stack = dsp::StreamStack::build(&sig, &DspConfig::default()).unwrap();
        let ds = dsp::windows_from_stack(&stack, None, 300, stride).unwrap();
        if let Ok(plan) = harness::split_by_cycles(&ds, &b) {
            prop_assert!(plan.is_disjoint(&ds));
            for &i in &plan.train {
                prop_assert!(ds.windows[i].end <= b[2]);
            }
            for &i in &plan.val {
                prop_assert!(ds.windows[i].start >= b[2]);
            }
            prop_assert_eq!(plan.train.len() + plan.val.len() + plan.dropped.len(), ds.len());
        }
    }
}
