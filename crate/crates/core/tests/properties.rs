use duet_core::config::{ConfigBuilder, Preset, RunConfig, Source};
use duet_core::features::{mdseq, synth_pair, Genre, MusicSequence, SynthOptions, BEAT, CHROMA};
use duet_core::gw::{entropic_gw, GwConfig};
use duet_core::losses::{dance_metric_frames, music_metric};
use duet_core::metrics::{beats_alignment, frechet_distance, notes_accuracy};
use duet_core::rotations::{axis_angle_to_matrix, from_sixd, geodesic, matrix_to_axis_angle, slerp_resample, Mat3, Rotation6D, Vec3};
use duet_core::tensor::{Tape, Unary};
use duet_core::{ChordQuality, ChordSeed, DanceSequence, Skeleton, Tensor};
use proptest::prelude::*;

fn matrix(r: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, r * c).prop_map(move |v| Tensor::matrix(r, c, v).unwrap())
}

fn rotation() -> impl Strategy<Value = Mat3> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0f64..3.1).prop_filter_map("axis", |(a, angle)| {
        let v = Vec3::from(a);
        (v.norm() > 1e-3).then(|| axis_angle_to_matrix(v.normalize() * angle))
    })
}

fn dance(t: usize) -> impl Strategy<Value = DanceSequence> {
    (prop::collection::vec(rotation(), t * 24), prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), t)).prop_map(
        move |(rots, trans)| {
            let trans: Vec<Vec3> = trans.into_iter().map(Vec3::from).collect();
            let rots: Vec<Vec<Mat3>> = rots.chunks(24).map(|c| c.to_vec()).collect();
            DanceSequence::from_parts(&trans, &rots, 25.0).unwrap()
        },
    )
}

fn chroma_music(t: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec((0usize..12, prop::bool::ANY), t).prop_map(move |notes| {
        let mut m = Tensor::zeros(&[t, 13]);
        for (f, (n, beat)) in notes.into_iter().enumerate() {
            m.set(f, n, 1.0);
            m.set(f, 12, if beat { 1.0 } else { 0.0 });
        }
        m
    })
}

/// Symbolic music whose first half repeats one note, so the key root is
/// usually unambiguous.
fn keyed_music(t: usize) -> impl Strategy<Value = Tensor> {
    (0usize..12, chroma_music(t)).prop_map(move |(root, mut m)| {
        for f in 0..t / 2 {
            for c in 0..12 {
                m.set(f, c, if c == root { 1.0 } else { 0.0 });
            }
        }
        m
    })
}

fn permute_rows(m: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// The key root is the argmax of summed chroma; ties resolve by index and
/// are not rotation invariant.
fn unique_root(m: &Tensor) -> bool {
    let mut total = [0.0; 12];
    for r in 0..m.rows() {
        for (c, t) in total.iter_mut().enumerate() {
            *t += m.get(r, c);
        }
    }
    let max = total.iter().cloned().fold(f64::MIN, f64::max);
    total.iter().filter(|&&t| t == max).count() == 1
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 6, -30.0, 30.0)) {
        for causal in [false, true] {
            let s = x.slice(1, 0, 4).unwrap().softmax_rows(causal).unwrap();
            for r in 0..s.rows() {
                prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
                prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_forward_is_deterministic(x in matrix(3, 5, -1.0, 1.0), w in matrix(5, 2, -1.0, 1.0)) {
        let run = || {
            let mut t = Tape::new();
            let a = t.param(x.clone()).unwrap();
            let b = t.param(w.clone()).unwrap();
            let n = t.layer_norm(a).unwrap();
            let g = t.unary(n, Unary::Gelu).unwrap();
            let m = t.matmul(g, b).unwrap();
            let s = t.softmax(m).unwrap();
            t.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn sixd_decodes_to_a_rotation(v in prop::array::uniform6(-10.0f64..10.0)) {
        let a1 = Vec3::new(v[0], v[1], v[2]);
        let a2 = Vec3::new(v[3], v[4], v[5]);
        prop_assume!(a1.norm() > 1e-3 && (a2 - a1.normalize().dot(&a2) * a1.normalize()).norm() > 1e-3);
        let r = from_sixd(&Rotation6D(v)).unwrap();
        prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn geodesic_is_a_metric_angle(a in rotation(), b in rotation()) {
        let d = geodesic(&a, &b);
        prop_assert!((d - geodesic(&b, &a)).abs() < 1e-12);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&d));
        prop_assert!(geodesic(&a, &a) < 1e-6);
        let rel = matrix_to_axis_angle(&(b * a.transpose())).norm();
        prop_assert!((d - rel).abs() < 1e-9, "{} vs {}", d, rel);
    }

    #[test]
    fn resampling_commutes_with_pre_rotation(seq in prop::collection::vec(rotation(), 4..12), g in rotation()) {
        let rotated: Vec<Mat3> = seq.iter().map(|r| g * r).collect();
        let a = slerp_resample(&rotated, 60.0, 25.0).unwrap();
        let b = slerp_resample(&seq, 60.0, 25.0).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - g * y).abs().max() < 1e-9);
        }
    }

    #[test]
    fn synthetic_pairs_are_valid_and_serialize_deterministically(seed in 0u64..1000, t in 2usize..40, genre in 0usize..3) {
        let opts = SynthOptions { genre: Genre::ALL[genre], ..SynthOptions::default() };
        let (m, d) = synth_pair(seed, t, &opts);
        prop_assert_eq!(m.len(), t);
        prop_assert_eq!(d.len(), t);
        for f in 0..t {
            prop_assert!(m.frames().get(f, BEAT) == 0.0 || m.frames().get(f, BEAT) == 1.0);
            prop_assert!(m.frames().row(f)[CHROMA].iter().all(|c| (0.0..=1.0).contains(c)));
            for j in 0..24 {
                let r = d.rotation(f, j);
                prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-9);
            }
        }
        let bytes = mdseq::encode(mdseq::Modality::Music, m.frames(), m.fps);
        prop_assert_eq!(&bytes, &mdseq::encode(mdseq::Modality::Music, m.frames(), m.fps));
        let back = mdseq::decode_music(&bytes).unwrap();
        prop_assert_eq!(back.frames(), m.frames());
        prop_assert_eq!(back.fps, m.fps);
        let db = mdseq::encode(mdseq::Modality::Dance, d.frames(), d.fps);
        prop_assert_eq!(mdseq::decode_dance(&db).unwrap(), d);
    }

    #[test]
    fn gw_is_symmetric_and_isometry_invariant(
        zx in matrix(4, 3, -1.0, 1.0),
        zy in matrix(4, 2, -1.0, 1.0),
        flip in prop::array::uniform3(prop::bool::ANY),
    ) {
        let cfg = GwConfig::default();
        let v = entropic_gw(&zx, &zy, &cfg).unwrap().value;
        prop_assert!((v - entropic_gw(&zy, &zx, &cfg).unwrap().value).abs() < 1e-8);
        let mut iso = Tensor::zeros(&[4, 3]);
        for r in 0..4 {
            for c in 0..3 {
                let s = if flip[c] { -1.0 } else { 1.0 };
                iso.set(r, (c + 1) % 3, s * zx.get(r, c));
            }
        }
        prop_assert!((v - entropic_gw(&iso, &zy, &cfg).unwrap().value).abs() < 1e-10);
    }

    #[test]
    fn gw_is_invariant_to_joint_batch_permutation(zx in matrix(5, 3, -1.0, 1.0), zy in matrix(5, 3, -1.0, 1.0), k in 1usize..5) {
        let perm: Vec<usize> = (0..5).map(|i| (i + k) % 5).collect();
        let cfg = GwConfig::default();
        let a = entropic_gw(&zx, &zy, &cfg).unwrap().value;
        let b = entropic_gw(&permute_rows(&zx, &perm), &permute_rows(&zy, &perm), &cfg).unwrap().value;
        prop_assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn gw_marginals_and_monotone_outer_loop(m in 3usize..9, seed in prop::collection::vec(0.0f64..0.25, 16 * 3)) {
        let zx = Tensor::matrix(m, 3, seed[..m * 3].to_vec()).unwrap();
        let zy = Tensor::matrix(m, 3, seed[m * 3..2 * m * 3].to_vec()).unwrap();
        let s = entropic_gw(&zx, &zy, &GwConfig::default()).unwrap();
        prop_assert!(s.plan.marginal_residual() < 1e-6);
        for w in s.history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", s.history);
        }
    }

    #[test]
    fn dance_metric_is_a_pseudometric(a in dance(3), b in dance(3), perm in Just([2usize, 0, 1])) {
        let (fa, fb) = (a.frames(), b.frames());
        let ab = dance_metric_frames(fa, fb).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!(dance_metric_frames(fa, fa).unwrap() < 1e-12);
        prop_assert!((ab - dance_metric_frames(fb, fa).unwrap()).abs() < 1e-9 * ab.max(1.0));
        let relabeled = dance_metric_frames(&permute_rows(fa, &perm), &permute_rows(fb, &perm)).unwrap();
        prop_assert!((ab - relabeled).abs() < 1e-9 * ab.max(1.0));
    }

    #[test]
    fn music_metric_ignores_mfcc(a in chroma_music(5), b in chroma_music(5), noise in matrix(5, 40, -5.0, 5.0)) {
        let full = |m: &Tensor, extra: &Tensor| {
            let sym = MusicSequence::new(m.clone(), 25.0).unwrap().full();
            let mut f = sym.clone();
            for r in 0..5 {
                for c in 0..40 {
                    f.set(r, c, extra.get(r, c));
                }
            }
            MusicSequence::new(f, 25.0).unwrap()
        };
        let zero = Tensor::zeros(&[5, 40]);
        let base = music_metric(&full(&a, &zero), &full(&b, &zero)).unwrap();
        prop_assert_eq!(base, music_metric(&full(&a, &noise), &full(&b, &zero)).unwrap());
        prop_assert_eq!(base, music_metric(&full(&b, &zero), &full(&a, &noise)).unwrap());
        prop_assert!(music_metric(&full(&a, &noise), &full(&a, &zero)).unwrap() == 0.0);
    }

    #[test]
    fn frechet_is_symmetric_and_triangular(a in dance(2), b in dance(2), c in dance(2)) {
        let sk = Skeleton::canonical();
        let ab = frechet_distance(&a, &b, &sk).unwrap();
        let bc = frechet_distance(&b, &c, &sk).unwrap();
        let ac = frechet_distance(&a, &c, &sk).unwrap();
        prop_assert!((ab - frechet_distance(&b, &a, &sk).unwrap()).abs() < 1e-12);
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn beats_ignore_rigid_translation(seed in 0u64..500, shift in prop::array::uniform3(-3.0f64..3.0)) {
        let (m, d) = synth_pair(seed, 40, &SynthOptions::default());
        let mut moved = d.frames().clone();
        for f in 0..d.len() {
            for k in 0..3 {
                moved.set(f, k, moved.get(f, k) + shift[k]);
            }
        }
        let moved = DanceSequence::new(moved, d.fps).unwrap();
        let sk = Skeleton::canonical();
        let a = beats_alignment(&d, &m, &sk).unwrap();
        let b = beats_alignment(&moved, &m, &sk).unwrap();
        prop_assert_eq!(a.kinematic_beats, b.kinematic_beats);
        prop_assert_eq!(a.percent, b.percent);
    }

    #[test]
    fn notes_accuracy_ignores_joint_transposition(a in keyed_music(12), b in keyed_music(12), k in 0usize..12, minor in prop::bool::ANY) {
        let q = if minor { ChordQuality::Minor } else { ChordQuality::Major };
        let key = ChordSeed::new(0, q);
        let shift = |m: &Tensor| {
            let mut out = m.clone();
            for r in 0..m.rows() {
                for c in 0..12 {
                    out.set(r, (c + k) % 12, m.get(r, c));
                }
            }
            MusicSequence::new(out, 25.0).unwrap().with_key(key)
        };
        let plain = |m: &Tensor| MusicSequence::new(m.clone(), 25.0).unwrap().with_key(key);
        prop_assume!(unique_root(&a) && unique_root(&b));
        let x = notes_accuracy(&plain(&a), &plain(&b)).unwrap().accuracy;
        let y = notes_accuracy(&shift(&a), &shift(&b)).unwrap().accuracy;
        prop_assert_eq!(x, y);
    }

    #[test]
    fn run_config_round_trips(seed in 0u64..u64::MAX, steps in 1u64..100_000, batch in 2usize..64, gw in prop::bool::ANY) {
        let r = ConfigBuilder::new(Preset::Desk)
            .set("seed", serde_json::json!(seed), Source::Flag).unwrap()
            .set("steps", serde_json::json!(steps), Source::Flag).unwrap()
            .set("train.batch_size", serde_json::json!(batch), Source::File).unwrap()
            .set("train.use_gw", serde_json::json!(gw), Source::Env).unwrap()
            .build().unwrap();
        prop_assert_eq!(RunConfig::from_json(&r.config.to_json()).unwrap(), r.config.clone());
        prop_assert_eq!(r.config.seed, seed);
        prop_assert_eq!(r.provenance["train.use_gw"], Source::Env);
    }
}
