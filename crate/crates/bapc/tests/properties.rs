//! Randomized invariants over the core building blocks: framing geometry,
//! archive and checkpoint round-trips, config parsing, the learning-rate
//! schedule, objective identities, masking structure, and AR stability.

use proptest::collection::vec;
use proptest::prelude::*;

use bapc::archive::{
    read_feature_archive, read_label_archive, write_feature_archive, write_label_archive,
};
use bapc::checkpoint::Checkpoint;
use bapc::config::ConfigMap;
use bapc::datagen::ar_is_stable;
use bapc::objectives::AlignmentLabels;
use bapc::eval::frame_accuracy;
use bapc::features::{frame_signal, AudioBuffer, FeatureSequence};
use bapc::net::{HeadKind, Model, ModelKind, ModelSpec};
use bapc::objectives::{apc_loss, biapc_loss, ce_loss, mpc_mask, mpc_loss};
use bapc::rng::SeedStreams;
use bapc::tape::Tape;
use bapc::tensor::Tensor;
use bapc::trainer::lr_at_epoch;

fn tensor_f64(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
    Tensor::matrix(rows, cols, vals.to_vec()).unwrap()
}

proptest! {
    /// Framing yields exactly `1 + (N − L) / S` frames whenever the signal
    /// covers one window. At a 1 kHz sample rate the ms-based config maps
    /// one-to-one onto sample counts, so the formula can be pinned exactly.
    #[test]
    fn frame_count_formula(
        n in 2usize..4000,
        l in 2usize..400,
        s in 1usize..200,
    ) {
        prop_assume!(n >= l);
        let audio = AudioBuffer::new(
            (0..n).map(|k| ((k as f64) * 0.37).sin() * 0.5).collect(),
            1000,
        ).unwrap();
        let frames = frame_signal(&audio, l as f64, s as f64).unwrap();
        prop_assert_eq!(frames.rows(), 1 + (n - l) / s);
        prop_assert_eq!(frames.cols(), l);
    }

    /// Too-short audio is rejected rather than zero-padded.
    #[test]
    fn framing_rejects_audio_shorter_than_one_window(
        n in 1usize..200,
        l in 2usize..400,
    ) {
        prop_assume!(n < l);
        let audio = AudioBuffer::new(vec![0.1; n], 1000).unwrap();
        prop_assert!(frame_signal(&audio, l as f64, 10.0).is_err());
    }

    /// Feature archives round-trip bit-exactly (payload is f32).
    #[test]
    fn feature_archive_roundtrip(
        utts in vec((1usize..12, 1usize..6, any::<u32>()), 1..5),
    ) {
        let seqs: Vec<FeatureSequence> = utts.iter().enumerate().map(|(i, &(t, d, seed))| {
            let mut rng = SeedStreams::new(seed as u64).stream("prop-feats");
            let vals: Vec<f64> = (0..t * d)
                .map(|_| rng.random_range(-4.0f32..4.0) as f64)
                .collect();
            FeatureSequence::new(format!("u{i}"), tensor_f64(t, d, &vals))
        }).collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.farc");
        write_feature_archive(&path, &seqs).unwrap();
        let back = read_feature_archive(&path).unwrap();

        prop_assert_eq!(back.len(), seqs.len());
        for (a, b) in seqs.iter().zip(&back) {
            prop_assert_eq!(&a.utterance_id, &b.utterance_id);
            prop_assert_eq!(a.frames.shape(), b.frames.shape());
            for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
                prop_assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
    }

    /// Label archives round-trip exactly, including the class count.
    #[test]
    fn label_archive_roundtrip(
        classes in 1u32..7,
        utts in vec((1usize..20, any::<u32>()), 1..5),
    ) {
        let labels: Vec<AlignmentLabels> = utts.iter().enumerate().map(|(i, &(t, seed))| {
            let mut rng = SeedStreams::new(seed as u64).stream("prop-labels");
            AlignmentLabels::new(
                format!("u{i}"),
                (0..t).map(|_| rng.random_range(0..classes)).collect(),
            )
        }).collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.larc");
        write_label_archive(&path, &labels, classes as usize).unwrap();
        let (back, c) = read_label_archive(&path).unwrap();

        prop_assert_eq!(c, classes as usize);
        prop_assert_eq!(back.len(), labels.len());
        for (a, b) in labels.iter().zip(&back) {
            prop_assert_eq!(&a.utterance_id, &b.utterance_id);
            prop_assert_eq!(&a.labels, &b.labels);
        }
    }

    /// Rendering a config and parsing it back is the identity.
    #[test]
    fn config_render_parse_roundtrip(
        entries in vec(("[a-z][a-z0-9_.]{0,11}", "[a-zA-Z0-9_./-]{1,12}"), 0..8),
    ) {
        let mut map = ConfigMap::new();
        for (k, v) in &entries {
            map.set(k, v);
        }
        let back = ConfigMap::parse(&map.render()).unwrap();
        prop_assert_eq!(back.render(), map.render());
    }

    /// The schedule holds `lr0` through the hold epochs, never increases,
    /// and lands exactly on `lr0 · λ` at the final epoch.
    #[test]
    fn lr_schedule_shape(
        lr0_exp in -5.0f64..0.0,
        lambda_exp in -4.0f64..0.0,
        epochs in 1usize..40,
        hold_frac in 0.0f64..1.0,
    ) {
        let lr0 = 10f64.powf(lr0_exp);
        let lambda = 10f64.powf(lambda_exp);
        let hold = ((epochs as f64) * hold_frac) as usize;
        let rates: Vec<f64> = (1..=epochs)
            .map(|e| lr_at_epoch(lr0, lambda, epochs, hold, e).unwrap())
            .collect();
        for (i, &r) in rates.iter().enumerate() {
            if i + 1 <= hold {
                prop_assert_eq!(r, lr0);
            }
            if i > 0 {
                prop_assert!(r <= rates[i - 1] + 1e-18);
            }
        }
        if hold < epochs {
            let last = rates[epochs - 1];
            prop_assert!(((last - lr0 * lambda) / (lr0 * lambda)).abs() < 1e-12);
        }
        prop_assert!(lr_at_epoch(lr0, lambda, epochs, hold, 0).is_err());
        prop_assert!(lr_at_epoch(lr0, lambda, epochs, hold, epochs + 1).is_err());
    }

    /// Forward-only weighting of the two-direction loss collapses to the
    /// one-direction loss exactly, and the losses match a direct sum.
    #[test]
    fn biapc_weight_degeneracy_and_direct_sum(
        t in 3usize..10,
        d in 1usize..4,
        n in 1usize..3,
        seed in any::<u32>(),
    ) {
        prop_assume!(t > n);
        let mut rng = SeedStreams::new(seed as u64).stream("prop-losses");
        let mut draw = |t: usize, d: usize| -> Tensor<f64> {
            let vals: Vec<f64> = (0..t * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            tensor_f64(t, d, &vals)
        };
        let x = draw(t, d);
        let yf = draw(t, d);
        let yr = draw(t, d);

        let mut tape = Tape::<f64>::new();
        let vf = tape.constant(yf.clone());
        let vr = tape.constant(yr.clone());
        let apc = apc_loss(&mut tape, vf, &x, n).unwrap();
        let bi_fwd_only = biapc_loss(&mut tape, vf, vr, &x, n, (1.0, 0.0)).unwrap();
        prop_assert_eq!(
            tape.value(apc).data()[0].to_bits(),
            tape.value(bi_fwd_only).data()[0].to_bits()
        );

        // Direct evaluation of both direction terms.
        let mut fwd = 0.0;
        let mut rev = 0.0;
        for r in 0..t - n {
            for c in 0..d {
                fwd += (x.at(r + n, c) - yf.at(r, c)).abs();
                rev += (x.at(r, c) - yr.at(r + n, c)).abs();
            }
        }
        let apc_val = tape.value(apc).data()[0];
        prop_assert!((apc_val - fwd).abs() <= 1e-9 * (1.0 + fwd.abs()));
        let bi = biapc_loss(&mut tape, vf, vr, &x, n, (0.3, 0.7)).unwrap();
        let bi_val = tape.value(bi).data()[0];
        let want = 0.3 * fwd + 0.7 * rev;
        prop_assert!((bi_val - want).abs() <= 1e-9 * (1.0 + want.abs()));
    }

    /// Cross-entropy depends on logit differences only: adding a per-frame
    /// constant to every class logit leaves the loss unchanged.
    #[test]
    fn ce_loss_is_shift_invariant(
        t in 1usize..8,
        c in 2usize..6,
        seed in any::<u32>(),
        mean_frames in any::<bool>(),
    ) {
        let mut rng = SeedStreams::new(seed as u64).stream("prop-ce");
        let logits: Vec<f64> = (0..t * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<u32> = (0..t).map(|_| rng.random_range(0..c as u32)).collect();
        let shifts: Vec<f64> = (0..t).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shifted: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &v)| v + shifts[i / c])
            .collect();

        let mut tape = Tape::<f64>::new();
        let a = tape.constant(tensor_f64(t, c, &logits));
        let b = tape.constant(tensor_f64(t, c, &shifted));
        let la = ce_loss(&mut tape, a, &labels, mean_frames).unwrap();
        let lb = ce_loss(&mut tape, b, &labels, mean_frames).unwrap();
        let (va, vb) = (tape.value(la).data()[0], tape.value(lb).data()[0]);
        prop_assert!((va - vb).abs() <= 1e-9 * (1.0 + va.abs()));
        prop_assert!(va >= 0.0);
    }

    /// Masking zeroes whole frames, leaves the rest untouched, always masks
    /// at least one frame, and the masked loss scores masked frames only.
    #[test]
    fn mpc_mask_structure(
        t in 1usize..40,
        d in 1usize..5,
        ratio in 0.01f64..0.99,
        seed in any::<u32>(),
    ) {
        let mut rng = SeedStreams::new(seed as u64).stream("prop-mask");
        let vals: Vec<f64> = (0..t * d).map(|_| rng.random_range(0.5..2.0)).collect();
        let x = tensor_f64(t, d, &vals);
        let (masked, mask) = mpc_mask(&x, ratio, &mut rng).unwrap();

        prop_assert_eq!(mask.len(), t);
        prop_assert!(mask.iter().any(|&m| m));
        for r in 0..t {
            for c in 0..d {
                if mask[r] {
                    prop_assert_eq!(masked.at(r, c), 0.0);
                } else {
                    prop_assert_eq!(masked.at(r, c).to_bits(), x.at(r, c).to_bits());
                }
            }
        }

        // A model that answered with the clean input would be scored only on
        // the frames it could not see.
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(x.clone());
        let loss = mpc_loss(&mut tape, y, &x, &mask).unwrap();
        prop_assert_eq!(tape.value(loss).data()[0], 0.0);
        let y0 = tape.constant(Tensor::zeros(vec![t, d]));
        let loss0 = mpc_loss(&mut tape, y0, &x, &mask).unwrap();
        let want: f64 = (0..t)
            .filter(|&r| mask[r])
            .map(|r| (0..d).map(|c| x.at(r, c).abs()).sum::<f64>())
            .sum();
        let got = tape.value(loss0).data()[0];
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
    }

    /// The recurrence stability test agrees with explicitly computed roots
    /// of the order-2 characteristic polynomial z² − a1·z − a2.
    #[test]
    fn ar2_stability_matches_root_moduli(a1 in -3.0f64..3.0, a2 in -3.0f64..3.0) {
        let disc = a1 * a1 + 4.0 * a2;
        let max_modulus = if disc >= 0.0 {
            let r1 = (a1 + disc.sqrt()) / 2.0;
            let r2 = (a1 - disc.sqrt()) / 2.0;
            r1.abs().max(r2.abs())
        } else {
            (-a2).sqrt()
        };
        // Stay away from the boundary, where either formulation may round
        // differently.
        prop_assume!((max_modulus - 1.0).abs() > 1e-6);
        prop_assert_eq!(ar_is_stable(&[a1, a2]), max_modulus < 1.0);
    }

    /// Checkpoints round-trip through disk bit-exactly: tensors, shape
    /// metadata, objective, seed, and recorded init hashes.
    #[test]
    fn checkpoint_file_roundtrip(
        uni in any::<bool>(),
        layers in 1usize..3,
        hidden in 2usize..6,
        input_dim in 1usize..4,
        batchnorm in any::<bool>(),
        classifier in any::<bool>(),
        seed in any::<u32>(),
    ) {
        let spec = ModelSpec {
            kind: if uni { ModelKind::Uni } else { ModelKind::Bi },
            num_layers: layers,
            hidden,
            input_dim,
            dropout: 0.0,
            batchnorm,
            head: if classifier { HeadKind::Classifier(3) } else { HeadKind::Prediction },
        };
        let model =
            Model::<f32>::init(spec, &mut SeedStreams::new(seed as u64).stream("prop-ckpt"))
                .unwrap();
        let mut hashes = std::collections::BTreeMap::new();
        hashes.insert("layer1.fwd_same.W".to_string(), "abc123".to_string());
        let ckpt = Checkpoint::from_model(&model, 7, "apc", seed as u64, hashes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bapc");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        prop_assert_eq!(&back.spec, &ckpt.spec);
        prop_assert_eq!(back.epoch, ckpt.epoch);
        prop_assert_eq!(&back.objective, &ckpt.objective);
        prop_assert_eq!(back.seed, ckpt.seed);
        prop_assert_eq!(&back.init_hashes, &ckpt.init_hashes);
        prop_assert_eq!(back.tensors.len(), ckpt.tensors.len());
        for ((an, at), (bn, bt)) in ckpt.tensors.iter().zip(&back.tensors) {
            prop_assert_eq!(an, bn);
            prop_assert_eq!(at.shape(), bt.shape());
            for (x, y) in at.data().iter().zip(bt.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    /// Frame accuracy only sees the argmax: any positive rescaling plus
    /// per-frame shift of the logits leaves it unchanged.
    #[test]
    fn frame_accuracy_is_argmax_invariant(
        t in 1usize..12,
        c in 2usize..5,
        scale in 0.1f32..10.0,
        seed in any::<u32>(),
    ) {
        let mut rng = SeedStreams::new(seed as u64).stream("prop-acc");
        let logits: Vec<f32> = (0..t * c).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let labels: Vec<u32> = (0..t).map(|_| rng.random_range(0..c as u32)).collect();
        let shifts: Vec<f32> = (0..t).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let transformed: Vec<f32> = logits
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale + shifts[i / c])
            .collect();

        let a = Tensor::matrix(t, c, logits).unwrap();
        let b = Tensor::matrix(t, c, transformed).unwrap();
        let acc_a = frame_accuracy(&[a], &[&labels]).unwrap();
        let acc_b = frame_accuracy(&[b], &[&labels]).unwrap();
        prop_assert_eq!(acc_a, acc_b);
        prop_assert!((0.0..=1.0).contains(&acc_a));
    }
}
