use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relclip::dataset::{build_splits, CaptionMode, DatasetConfig, SceneSpec, SplitName, Vocab};
use relclip::dataset::{captions_for, render_image, Caption, Example};
use relclip::evaluation::{
    cosine_matrix, evaluate, label_set_recognition, retrieval_accuracy, score_split, write_similarity_csv, Criterion,
};
use relclip::model::{ClipConfig, ClipModel};
use relclip::numerics::Tensor;

fn pair_example(cfg: &DatasetConfig, l: u32, r: u32, mode: CaptionMode) -> Example {
    let scene = SceneSpec::pair(l, r, 1, 6);
    let vocab = Vocab::new(cfg.n_tot);
    Example { image: render_image(&scene, cfg).unwrap(), captions: captions_for(&scene, mode, &vocab), scene }
}

fn universe(vocab: &Vocab, n: u32) -> Vec<Caption> {
    let mut out = Vec::new();
    for a in 1..=n {
        out.push(Caption([vocab.label(a), vocab.is(), vocab.in_image(), vocab.eot()]));
        for b in 1..=n {
            if a != b {
                out.push(Caption([vocab.label(a), vocab.left_of(), vocab.label(b), vocab.eot()]));
                out.push(Caption([vocab.label(a), vocab.right_of(), vocab.label(b), vocab.eot()]));
            }
        }
    }
    out.sort();
    out
}

/// Similarities with `hi` for the listed captions and `lo` elsewhere.
fn sims_for(universe: &[Caption], rows: &[Vec<(Caption, f64)>], lo: f64) -> Tensor<f64> {
    Tensor::from_fn(rows.len(), universe.len(), |i, j| {
        rows[i].iter().find(|(c, _)| *c == universe[j]).map(|x| x.1).unwrap_or(lo)
    })
}

#[test]
fn perfect_similarity_gives_full_accuracy() {
    let cfg = DatasetConfig::standard(6, 2);
    let vocab = Vocab::new(6);
    let uni = universe(&vocab, 6);
    let exs: Vec<Example> = [(1, 2), (3, 1), (5, 6)].iter().map(|&(l, r)| pair_example(&cfg, l, r, CaptionMode::LeftOnly)).collect();
    let sims = sims_for(&uni, &exs.iter().map(|e| vec![(e.captions[0], 1.0)]).collect::<Vec<_>>(), -1.0);
    let correct: Vec<Vec<Caption>> = exs.iter().map(|e| e.captions.clone()).collect();
    assert_eq!(retrieval_accuracy(&sims, &correct, &uni, Criterion::Top1).accuracy, 1.0);
    assert_eq!(label_set_recognition(&sims, &exs, &uni, &vocab), 1.0);
}

#[test]
fn random_representations_sit_at_chance() {
    // Universe of 250 captions, as for 10 categories with left-only captions.
    let vocab = Vocab::new(20);
    let mut uni = universe(&vocab, 20);
    uni.truncate(250);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20_000;
    let d = 16;
    let img = Tensor::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
    let txt = Tensor::from_fn(uni.len(), d, |_, _| rng.gen_range(-1.0..1.0));
    let sims = cosine_matrix(&img, &txt);
    let correct: Vec<Vec<Caption>> = (0..n).map(|_| vec![*uni.choose(&mut rng).unwrap()]).collect();
    let acc = retrieval_accuracy(&sims, &correct, &uni, Criterion::Top1).accuracy;
    let p = 1.0 / 250.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() < 4.0 * sigma, "accuracy {acc} vs chance {p}");
}

#[test]
fn top2_needs_both_captions() {
    let cfg = DatasetConfig::standard(6, 2);
    let vocab = Vocab::new(6);
    let uni = universe(&vocab, 6);
    let ex = pair_example(&cfg, 2, 4, CaptionMode::LeftAndRight);
    let (xly, yrx) = (ex.captions[0], ex.captions[1]);
    let decoy = Caption([vocab.label(4), vocab.left_of(), vocab.label(2), vocab.eot()]);
    let correct = vec![ex.captions.clone()];
    let both = sims_for(&uni, &[vec![(xly, 0.9), (yrx, 0.8), (decoy, 0.7)]], 0.0);
    assert_eq!(retrieval_accuracy(&both, &correct, &uni, Criterion::Top2Both).accuracy, 1.0);
    let one = sims_for(&uni, &[vec![(xly, 0.9), (decoy, 0.8), (yrx, 0.7)]], 0.0);
    assert_eq!(retrieval_accuracy(&one, &correct, &uni, Criterion::Top2Both).accuracy, 0.0);
    assert_eq!(retrieval_accuracy(&one, &correct, &uni, Criterion::Top1).accuracy, 1.0);
}

#[test]
fn swapped_relation_keeps_label_set() {
    let cfg = DatasetConfig::standard(6, 2);
    let vocab = Vocab::new(6);
    let uni = universe(&vocab, 6);
    let exs: Vec<Example> = [(1, 2), (3, 4)].iter().map(|&(l, r)| pair_example(&cfg, l, r, CaptionMode::LeftOnly)).collect();
    let swapped = |e: &Example| {
        let c = e.captions[0].0;
        Caption([c[2], c[1], c[0], c[3]])
    };
    let sims = sims_for(&uni, &exs.iter().map(|e| vec![(swapped(e), 1.0)]).collect::<Vec<_>>(), 0.0);
    let correct: Vec<Vec<Caption>> = exs.iter().map(|e| e.captions.clone()).collect();
    assert_eq!(retrieval_accuracy(&sims, &correct, &uni, Criterion::Top1).accuracy, 0.0);
    assert_eq!(label_set_recognition(&sims, &exs, &uni, &vocab), 1.0);
    let rep = score_split(SplitName::UnseenPair, &sims, &exs, &uni, &vocab);
    assert_eq!(rep.confusion.same_label_set, 2);
    // A single-object caption never counts as label-set recognition.
    let single = Caption([vocab.label(1), vocab.is(), vocab.in_image(), vocab.eot()]);
    let s2 = sims_for(&uni, &[vec![(single, 1.0)], vec![(single, 1.0)]], 0.0);
    assert_eq!(label_set_recognition(&s2, &exs, &uni, &vocab), 0.0);
}

#[test]
fn ties_and_universe_order_do_not_change_accuracy() {
    let cfg = DatasetConfig::standard(6, 2);
    let vocab = Vocab::new(6);
    let uni = universe(&vocab, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let exs: Vec<Example> = (0..30)
        .map(|_| {
            let l = rng.gen_range(1..=6);
            let r = (l % 6) + 1;
            pair_example(&cfg, l, r, CaptionMode::LeftOnly)
        })
        .collect();
    // Coarse values so ties are common.
    let sims = Tensor::from_fn(exs.len(), uni.len(), |_, _| rng.gen_range(0..3) as f64);
    let correct: Vec<Vec<Caption>> = exs.iter().map(|e| e.captions.clone()).collect();
    let base = retrieval_accuracy(&sims, &correct, &uni, Criterion::Top1);
    let mut perm: Vec<usize> = (0..uni.len()).collect();
    perm.shuffle(&mut rng);
    let uni_p: Vec<Caption> = perm.iter().map(|&j| uni[j]).collect();
    let sims_p = Tensor::from_fn(exs.len(), uni.len(), |i, j| sims.at(i, perm[j]));
    let shuffled = retrieval_accuracy(&sims_p, &correct, &uni_p, Criterion::Top1);
    assert_eq!(base, shuffled);
    assert_eq!(label_set_recognition(&sims, &exs, &uni, &vocab), label_set_recognition(&sims_p, &exs, &uni_p, &vocab));
}

#[test]
#[should_panic(expected = "not in universe")]
fn missing_correct_caption_is_a_contract_violation() {
    let cfg = DatasetConfig::standard(6, 2);
    let vocab = Vocab::new(6);
    let ex = pair_example(&cfg, 1, 2, CaptionMode::LeftOnly);
    let uni = vec![Caption([vocab.label(3), vocab.is(), vocab.in_image(), vocab.eot()])];
    retrieval_accuracy(&Tensor::zeros([1, 1]), &[ex.captions], &uni, Criterion::Top1);
}

#[test]
fn untrained_model_reports_all_sets_and_top2_never_exceeds_label_set() {
    let data = DatasetConfig { caption_mode: CaptionMode::LeftAndRight, ..DatasetConfig::standard(10, 2) };
    let bundle = build_splits(&data).unwrap();
    let cfg = ClipConfig::reduced(&data);
    let model = ClipModel::<f32>::init(&cfg, 0);
    let rep = evaluate(&model, &cfg, &bundle);
    assert_eq!(rep.sets.len(), 3);
    let unseen = rep.set(SplitName::UnseenPair);
    assert_eq!(unseen.criterion, Criterion::Top2Both);
    assert!(unseen.accuracy <= unseen.label_set + 1e-12);
    assert_eq!(rep.set(SplitName::SinglePos).criterion, Criterion::Top1);
    for s in &rep.sets {
        let c = &s.confusion;
        assert_eq!(c.correct + c.same_label_set + c.partial_labels + c.other, s.n_images);
        assert!((0.0..=1.0).contains(&s.accuracy));
    }
    assert!(rep.to_json().contains("\"unseen_pair\""));
    assert_eq!(evaluate(&model, &cfg, &bundle), rep);
}

#[test]
fn similarity_csv_has_annotated_rows() {
    let data = DatasetConfig::standard(6, 2);
    let bundle = build_splits(&DatasetConfig { n_pair: 4, ..data }).unwrap();
    let vocab = bundle.vocab();
    let exs = bundle.split(SplitName::UnseenPair);
    let sims = Tensor::from_fn(exs.len(), bundle.text_universe.len(), |i, j| (i * 100 + j) as f64);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sim.csv");
    write_similarity_csv(&p, SplitName::UnseenPair, &sims, exs, &bundle.text_universe, &vocab).unwrap();
    let mut r = csv::Reader::from_path(&p).unwrap();
    assert_eq!(r.headers().unwrap().len(), 3 + bundle.text_universe.len());
    let first = r.records().next().unwrap().unwrap();
    assert_eq!(&first[1], "unseen_pair");
    assert_eq!(first[3].parse::<f64>().unwrap(), 0.0);
}
