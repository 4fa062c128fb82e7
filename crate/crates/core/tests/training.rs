use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relclip::dataset::{build_splits, CaptionMode, DatasetConfig, SplitBundle};
use relclip::encoders::EncoderConfig;
use relclip::model::ClipConfig;
use relclip::numerics::{gradcheck, Tape, Tensor};
use relclip::training::{clip_loss, decays, train, TrainConfig, TrainState};

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn loss_of(img: &Tensor<f64>, txt: &Tensor<f64>, scale: f64) -> f64 {
    let tape = Tape::new();
    let l = clip_loss(tape.constant(img.clone()), tape.constant(txt.clone()), tape.constant(Tensor::new([1], vec![scale])));
    l.value().item()
}

// Written from the definition with explicit sums.
fn brute_force_loss(img: &Tensor<f64>, txt: &Tensor<f64>, scale: f64) -> f64 {
    let b = img.rows();
    let cos = |i: usize, j: usize| {
        let (a, c) = (img.row(i), txt.row(j));
        let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * c.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let s = |i: usize, j: usize| scale * cos(i, j);
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..b {
        i2t += -(s(i, i).exp() / (0..b).map(|j| s(i, j).exp()).sum::<f64>()).ln();
        t2i += -(s(i, i).exp() / (0..b).map(|j| s(j, i).exp()).sum::<f64>()).ln();
    }
    0.5 * (i2t / b as f64 + t2i / b as f64)
}

#[test]
fn single_pair_batch_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        assert_eq!(loss_of(&random(&mut rng, 1, 6), &random(&mut rng, 1, 6), 14.3), 0.0);
    }
}

#[test]
fn aligned_orthonormal_rows_approach_zero_loss() {
    let eye = Tensor::<f64>::identity(4);
    let mut prev = f64::INFINITY;
    for scale in [1.0, 10.0, 100.0, 1000.0] {
        let l = loss_of(&eye, &eye, scale);
        assert!(l <= prev);
        prev = l;
    }
    assert!(prev < 1e-12);
}

#[test]
fn matches_brute_force_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (img, txt) = (random(&mut rng, 3, 5), random(&mut rng, 3, 5));
        for scale in [1.0, 7.5] {
            assert!((loss_of(&img, &txt, scale) - brute_force_loss(&img, &txt, scale)).abs() < 1e-12);
        }
    }
}

#[test]
fn symmetric_under_joint_row_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (img, txt) = (random(&mut rng, 5, 4), random(&mut rng, 5, 4));
    let perm = [3, 0, 4, 1, 2];
    let p = |t: &Tensor<f64>| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>());
    assert!((loss_of(&img, &txt, 3.0) - loss_of(&p(&img), &p(&txt), 3.0)).abs() < 1e-12);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![random(&mut rng, 4, 3), random(&mut rng, 4, 3), Tensor::new([1], vec![2.5])];
    let res = gradcheck::check(&inputs, 1e-5, 7, |_, v| clip_loss(v[0], v[1], v[2]));
    assert!(res.max_rel_error() < 1e-4, "{:?}", res.rel_errors);
}

#[test]
#[should_panic(expected = "zero-norm")]
fn zero_representation_is_rejected() {
    let z = Tensor::<f64>::zeros([2, 3]);
    loss_of(&z, &Tensor::identity(3).slice_rows(0, 2), 1.0);
}

#[test]
fn decay_exemptions() {
    assert!(decays("vision.blocks.0.attn.w_q"));
    assert!(decays("text.tok_emb"));
    assert!(decays("proj"));
    assert!(!decays("log_scale"));
    assert!(!decays("vision.blocks.1.ln2.gain"));
    assert!(!decays("text.ln_final.bias"));
}

fn tiny() -> (SplitBundle, ClipConfig) {
    let data = DatasetConfig { d_image: 6, n_tot: 6, n_pair: 4, n1: 3, n2: 2, n_val: 2, caption_mode: CaptionMode::LeftOnly, seed: 4 };
    let bundle = build_splits(&data).unwrap();
    let shrink = |c: EncoderConfig| EncoderConfig { m_h: 2, d_head: 8, d_model: 16, ..c };
    let cfg = ClipConfig { vision: shrink(EncoderConfig::vision(6, 6)), text: shrink(EncoderConfig::text(6)) };
    (bundle, cfg)
}

#[test]
fn fixed_seed_runs_write_identical_metrics() {
    let (bundle, cfg) = tiny();
    let tc = TrainConfig { epochs: 50, eval_every: 10, batch_size: Some(8), lr: 1e-3, seed: 11, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (sa, la) = train(&bundle, &cfg, &tc, Some(&a)).unwrap();
    let (sb, lb) = train(&bundle, &cfg, &tc, Some(&b)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(sa.model, sb.model);
    let read = |p: &std::path::Path| std::fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(la.rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 10, 20, 30, 40, 50]);
    assert!(a.join("final.ckpt").exists() && a.join("loss.csv").exists());
    assert!(la.rows.last().unwrap().train_loss < la.rows[0].train_loss);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let (bundle, cfg) = tiny();
    let tc = TrainConfig { epochs: 3, eval_every: 1, batch_size: Some(8), lr: 0.0, seed: 2, ..TrainConfig::default() };
    let init = TrainState::new(&cfg, &tc).model;
    let (state, log) = train(&bundle, &cfg, &tc, None).unwrap();
    assert_eq!(state.model, init);
    let accs: Vec<f64> = log.rows.iter().map(|r| r.acc_unseen_pair).collect();
    assert!(accs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn invalid_batch_size_is_a_config_error() {
    let (bundle, cfg) = tiny();
    let tc = TrainConfig { batch_size: Some(10_000), ..TrainConfig::default() };
    let e = train(&bundle, &cfg, &tc, None).err().unwrap();
    assert!(e.is_config() && e.to_string().contains("train.batch_size"));
}

#[test]
fn left_and_right_batches_train() {
    let (mut bundle, cfg) = tiny();
    bundle = build_splits(&relclip::dataset::DatasetConfig { caption_mode: CaptionMode::LeftAndRight, ..bundle.config }).unwrap();
    for dup in [false, true] {
        let tc = TrainConfig { epochs: 2, eval_every: 1, batch_size: Some(8), duplicate_caption_rows: dup, ..TrainConfig::default() };
        let (state, log) = train(&bundle, &cfg, &tc, None).unwrap();
        assert_eq!(state.epoch, 2);
        assert!(log.rows.iter().all(|r| r.train_loss.is_finite()));
    }
}
