use latentft::diffusion::NoiseSchedule;
use latentft::latent_dft::{analyze, synthesize};
use latentft::mask::{apply_mask, user_mask};
use latentft::metrics::pearson;
use latentft::tensor::{Dtype, Tensor};
use latentft::{FrequencyMask, KernelParams, LatentSequence, MaskKernel, SpectrumMeta};
use num_complex::Complex64;
use proptest::prelude::*;

fn latent() -> impl Strategy<Value = (usize, usize, Vec<f64>, usize)> {
    (1usize..4, 2usize..40, 1usize..4).prop_flat_map(|(c, t, l)| {
        (Just(c), Just(t), prop::collection::vec(-10.0f64..10.0, c * t), Just(l))
    })
}

fn seq(c: usize, t: usize, v: Vec<f64>) -> LatentSequence {
    LatentSequence::new(Tensor::new(vec![c, t], v).unwrap(), 50.0).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analysis_roundtrips((c, t, v, l) in latent()) {
        let z = seq(c, t, v.clone());
        let back = synthesize(&analyze(&z, l).unwrap()).unwrap();
        let err = back.values().data().iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-10 * (1.0 + norm(&v)));
    }

    #[test]
    fn parseval_on_half_spectrum((c, t, v, l) in latent()) {
        let spec = analyze(&seq(c, t, v.clone()), l).unwrap();
        let n = spec.meta().padded_len();
        for ch in 0..c {
            let row = &v[ch * t..(ch + 1) * t];
            let time: f64 = row.iter().map(|x| x * x).sum();
            let freq: f64 = spec.channel(ch).iter().enumerate().map(|(k, x)| {
                let edge = k == 0 || (n % 2 == 0 && k == n / 2);
                let w = if edge { 1.0 } else { 2.0 };
                w * x.norm_sqr()
            }).sum::<f64>() / n as f64;
            prop_assert!((time - freq).abs() <= 1e-10 * time.max(1e-300));
        }
    }

    #[test]
    fn padding_interpolates((c, t, v, l) in latent()) {
        let z = seq(c, t, v);
        let coarse = analyze(&z, 1).unwrap();
        let fine = analyze(&z, l).unwrap();
        let scale = coarse.coeffs().iter().map(|x| x.norm()).fold(1.0, f64::max);
        for ch in 0..c {
            for (k, x) in coarse.channel(ch).iter().enumerate() {
                let y: Complex64 = fine.channel(ch)[l * k];
                prop_assert!((x - y).norm() < 1e-10 * scale);
            }
        }
    }

    #[test]
    fn masking_is_idempotent_and_projects((c, t, v, l) in latent(), seed in any::<u64>()) {
        let spec = analyze(&seq(c, t, v), l).unwrap();
        let f = spec.n_bins();
        let keep: Vec<bool> = (0..f).map(|k| (seed >> (k % 64)) & 1 == 1).collect();
        let m = FrequencyMask::from_keep(keep.clone());
        let once = apply_mask(&spec, &m).unwrap();
        let twice = apply_mask(&once, &m).unwrap();
        prop_assert_eq!(once.coeffs(), twice.coeffs());
        for ch in 0..c {
            for k in 0..f {
                let x = once.channel(ch)[k];
                if keep[k] {
                    prop_assert_eq!(x, spec.channel(ch)[k]);
                } else {
                    prop_assert_eq!(x, Complex64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn band_bins_lie_in_band(t in 2usize..600, l in 1usize..4, fr in 1.0f64..200.0, a in 0.0f64..1.0, w in 0.001f64..1.0) {
        let meta = SpectrumMeta::new(t, l, fr).unwrap();
        let nyq = meta.nyquist_hz();
        let (lo, hi) = (a * nyq, (a * nyq + w * nyq).min(nyq * 0.999));
        prop_assume!(hi > lo);
        let bins = meta.band_to_bins(lo, hi).unwrap();
        for &k in &bins {
            let f = meta.bin_frequency(k).unwrap();
            prop_assert!(f >= lo && f < hi);
        }
        let expected = (0..meta.n_bins()).filter(|&k| {
            let f = meta.bin_frequency(k).unwrap();
            f >= lo && f < hi
        }).count();
        prop_assert_eq!(bins.len(), expected);
    }

    #[test]
    fn log_partition_tiles_axis(t in 16usize..600, l in 1usize..4, n in 2usize..6) {
        let meta = SpectrumMeta::new(t, l, 64.0).unwrap();
        let bands = meta.log_band_partition(n, 0.5).unwrap();
        prop_assert_eq!(bands.len(), n);
        prop_assert_eq!(bands[0].0, 0.0);
        prop_assert_eq!(bands[n - 1].1, meta.nyquist_hz());
        for w in bands.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
        }
        let m = user_mask(&bands, &meta).unwrap();
        prop_assert!(m.keep().iter().all(|&k| k));
    }

    #[test]
    fn kernel_rows_are_unit(f in 2usize..80, sigma in 0.05f64..3.0, log_axis in any::<bool>()) {
        let meta = SpectrumMeta::new(f, 2, 64.0).unwrap();
        let k = MaskKernel::for_meta(&meta, KernelParams { sigma, log_axis, ..Default::default() }).unwrap();
        let n = k.n_bins();
        for i in 0..n {
            let r: f64 = (0..n).map(|j| k.at(i, j) * k.at(i, j)).sum();
            prop_assert!((r - 1.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert!(k.at(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn schedule_decreases_to_zero(n in 1usize..200, smin in 1e-4f64..0.1, smax in 1.0f64..100.0, rho in 1.0f64..10.0) {
        let s = NoiseSchedule::karras(n, smin, smax, rho).unwrap();
        let v = s.sigmas();
        prop_assert_eq!(v.len(), n + 1);
        prop_assert!((v[0] - smax).abs() < 1e-9 * smax);
        prop_assert_eq!(v[n], 0.0);
        for w in v.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn pearson_is_affine_invariant(v in prop::collection::vec(-5.0f64..5.0, 8..64), a in 0.1f64..10.0, b in -10.0f64..10.0, seed in any::<u64>()) {
        let u: Vec<f64> = v.iter().enumerate().map(|(i, x)| x.sin() + ((seed >> (i % 64)) & 1) as f64).collect();
        let (Some(r1), Some(r2)) = (pearson(&u, &v), pearson(&u, &v.iter().map(|x| a * x + b).collect::<Vec<_>>())) else {
            return Ok(());
        };
        prop_assert!((r1 - r2).abs() < 1e-9);
        prop_assert!(r1.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn tensor_file_roundtrip(shape in prop::collection::vec(1usize..6, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) % 1000) as f64 / 7.0 - 50.0).collect();
        let t = Tensor::new(shape, data).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf, Dtype::F64).unwrap();
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}
