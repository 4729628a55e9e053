use super::*;
use crate::tokenizer::{build_vocab, Vocab};
use ndarray::array;

fn vocab(n: usize) -> Vocab {
    let words: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    build_vocab(&[words.join(" ")], n + 5).unwrap()
}

fn tiny_config(d: usize, layers: usize, heads: usize, k: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        num_layers: layers,
        num_heads: heads,
        ffn_size: 2 * d,
        num_labels: k,
        max_positions: 32,
        ..ModelConfig::default()
    }
}

fn bundle(d: usize, k: usize, seed: u64) -> ModelBundle {
    ModelBundle::new(tiny_config(d, 1, 2, k), BundleMeta::default(), vocab(6), vocab(6), seed).unwrap()
}

#[test]
fn same_seed_same_parameters() {
    let a = bundle(8, 3, 11);
    let b = bundle(8, 3, 11);
    assert_eq!(a.classifier.params, b.classifier.params);
    assert_eq!(a.generator.params, b.generator.params);
    assert_ne!(a.classifier.params, bundle(8, 3, 12).classifier.params);
}

#[test]
fn config_problems_are_listed() {
    let cfg = ModelConfig {
        d_model: 6,
        num_heads: 4,
        num_labels: 1,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.problems().len(), 2);
    assert!(cfg.validate().is_err());
}

// Plain-loop forward of a one-layer, one-head pre-norm encoder, read
// straight from the named parameters.
mod oracle {
    use super::super::params::ParamStore;

    pub fn get(store: &ParamStore, name: &str) -> Vec<Vec<f64>> {
        let m = store.value(store.index_of(name).unwrap());
        m.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        x.iter()
            .zip(g.iter().zip(b))
            .map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
            .collect()
    }

    fn affine(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(b)
            .map(|(row, b)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn encode(store: &ParamStore, ids: &[usize]) -> Vec<Vec<f64>> {
        let p = |n: &str| get(store, &format!("cls.enc.0.{n}"));
        let emb = get(store, "cls.embed");
        let d = emb[0].len();
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|i| {
                        let angle = pos as f64 / 10000f64.powf(2.0 * (i / 2) as f64 / d as f64);
                        emb[id][i] + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect()
            })
            .collect();
        let (g1, b1) = (p("ln_attn.g")[0].clone(), p("ln_attn.b")[0].clone());
        let h: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &g1, &b1)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| affine(&p("attn.q.w"), &p("attn.q.b")[0], r)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| affine(&p("attn.k.w"), &p("attn.k.b")[0], r)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| affine(&p("attn.v.w"), &p("attn.v.b")[0], r)).collect();
        for i in 0..x.len() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kr| q[i].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let ctx: Vec<f64> = (0..d).map(|c| e.iter().zip(&v).map(|(w, vr)| w / z * vr[c]).sum()).collect();
            let o = affine(&p("attn.o.w"), &p("attn.o.b")[0], &ctx);
            for c in 0..d {
                x[i][c] += o[c];
            }
        }
        let (g2, b2) = (p("ln_ffn.g")[0].clone(), p("ln_ffn.b")[0].clone());
        for r in x.iter_mut() {
            let h = norm(r, &g2, &b2);
            let up: Vec<f64> = affine(&p("ffn.up.w"), &p("ffn.up.b")[0], &h).into_iter().map(gelu).collect();
            let down = affine(&p("ffn.down.w"), &p("ffn.down.b")[0], &up);
            for c in 0..d {
                r[c] += down[c];
            }
        }
        let gf = get(store, "cls.enc.ln_final.g")[0].clone();
        let bf = get(store, "cls.enc.ln_final.b")[0].clone();
        x.iter().map(|r| norm(r, &gf, &bf)).collect()
    }
}

#[test]
fn classifier_encode_matches_plain_loop_forward() {
    let cfg = ModelConfig {
        d_model: 2,
        num_layers: 1,
        num_heads: 1,
        ffn_size: 3,
        num_labels: 2,
        max_positions: 8,
        ..ModelConfig::default()
    };
    let mut b = ModelBundle::new(cfg, BundleMeta::default(), vocab(3), vocab(3), 5).unwrap();
    // Hand-set a few tensors so the result does not hinge on initialization.
    let store = &mut b.classifier.params;
    let set = |store: &mut params::ParamStore, name: &str, m: Mat| {
        let i = store.index_of(name).unwrap();
        *store.value_mut(i) = m;
    };
    set(store, "cls.enc.0.attn.q.w", array![[1.0, 0.5], [-0.5, 1.0]]);
    set(store, "cls.enc.0.attn.k.w", array![[0.3, 0.0], [0.2, -1.0]]);
    set(store, "cls.enc.0.attn.v.w", array![[1.0, 0.0], [0.0, 2.0]]);
    set(store, "cls.enc.0.ln_attn.g", array![[1.5, 0.5]]);
    set(store, "cls.enc.0.ln_ffn.b", array![[0.1, -0.2]]);
    let ids = [1, 6];
    let expected = oracle::encode(&b.classifier.params, &ids);
    let got = b.classifier.encode(&ids).unwrap();
    for (a, e) in got.iter().zip(&expected[0]) {
        assert!((a - e).abs() < 1e-12, "{got:?} vs {:?}", expected[0]);
    }
}

#[test]
fn options_do_not_see_each_other() {
    let b = bundle(8, 3, 1);
    let a = b.classifier.predict_logits(&[&[1, 5, 2, 6, 3], &[1, 7, 3], &[1, 8, 2, 3]]).unwrap();
    let c = b.classifier.predict_logits(&[&[1, 5, 2, 6, 3], &[1, 7, 3], &[1, 9, 9, 9, 3]]).unwrap();
    assert!((a[0] - c[0]).abs() < 1e-12 && (a[1] - c[1]).abs() < 1e-12);
    assert!((a[2] - c[2]).abs() > 1e-9);
}

#[test]
fn option_permutation_permutes_scores() {
    let b = bundle(8, 3, 2);
    let seqs: [&[usize]; 3] = [&[1, 5, 3], &[1, 6, 7, 3], &[1, 8, 3]];
    let a = b.classifier.predict_logits(&seqs).unwrap();
    let p = b.classifier.predict_logits(&[seqs[2], seqs[0], seqs[1]]).unwrap();
    for (x, y) in [a[2], a[0], a[1]].iter().zip(&p) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn decoder_is_causal() {
    let b = bundle(8, 3, 3);
    let (l1, h1) = b.generator.forward(&[5, 6, 7, 3], &[0, 8, 9]).unwrap();
    let (_, h2) = b.generator.forward(&[5, 6, 7, 3], &[0, 8, 10]).unwrap();
    assert_eq!(l1.dim(), (3, 11));
    assert_eq!(h1.dim(), (3, 8));
    for t in 0..2 {
        for c in 0..8 {
            assert!((h1[[t, c]] - h2[[t, c]]).abs() < 1e-12);
        }
    }
    assert!((&h1.row(2) - &h2.row(2)).iter().any(|x| x.abs() > 1e-9));
    let memory = b.generator.encode_source(&[5, 6, 7, 3]).unwrap();
    let step = b.generator.next_token_logits(&memory, &[0, 8]).unwrap();
    for (a, e) in step.iter().zip(l1.row(1)) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn shape_and_vocab_errors() {
    let b = bundle(8, 3, 4);
    assert!(matches!(b.classifier.predict_logits(&[&[1, 99]]), Err(Error::Shape(_))));
    assert!(matches!(b.classifier.predict_logits(&[&[]]), Err(Error::Shape(_))));
    let long = vec![1; 33];
    assert!(matches!(b.classifier.encode(&long), Err(Error::Shape(_))));
}

#[test]
fn nli_head_has_three_outputs() {
    let cfg = ModelConfig {
        task: TaskKind::Nli,
        num_labels: 3,
        ..tiny_config(8, 1, 2, 3)
    };
    let b = ModelBundle::new(cfg, BundleMeta::default(), vocab(4), vocab(4), 0).unwrap();
    assert_eq!(b.classifier.predict_logits(&[&[1, 5, 2, 6, 3]]).unwrap().len(), 3);
    assert!(b.classifier.predict_logits(&[&[1, 3], &[1, 3]]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(8, 3, 9);
    save_checkpoint(&b, dir.path(), serde_json::json!({"dev_accuracy": 0.5})).unwrap();
    let (back, extra) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(extra["dev_accuracy"], 0.5);
    assert_eq!(back.classifier.params, b.classifier.params);
    assert_eq!(back.generator.params, b.generator.params);
    assert_eq!(back.config, b.config);
    assert_eq!(back.classifier_vocab, b.classifier_vocab);
    let seqs: [&[usize]; 3] = [&[1, 5, 3], &[1, 6, 3], &[1, 7, 3]];
    assert_eq!(
        back.classifier.predict_logits(&seqs).unwrap(),
        b.classifier.predict_logits(&seqs).unwrap()
    );
}

#[test]
fn teacher_forcing_shift() {
    assert_eq!(teacher_forcing_inputs(&[7, 8, 3]), vec![DECODER_START, 7, 8]);
}

#[test]
fn classifier_gradients_match_differences() {
    let mut b = bundle(4, 3, 6);
    let seqs: Vec<Vec<usize>> = vec![vec![1, 5, 2, 3], vec![1, 6, 3], vec![1, 7, 8, 3]];
    let loss = |c: &Classifier| {
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let p = c.logits(&mut g, &refs, &mut Mode::Eval).unwrap();
        let ce = g.cross_entropy(p, &[Some(1)]);
        let grads = g.backward(ce);
        let all: Vec<(params::ParamKey, Mat)> = grads.params().map(|(k, m)| (*k, m.clone())).collect();
        (g.scalar(ce), all)
    };
    let (_, grads) = loss(&b.classifier);
    for (key, analytic) in grads {
        for idx in ndarray::indices(analytic.dim()).into_iter().take(3) {
            let orig = b.classifier.params.value(key.index)[idx];
            b.classifier.params.value_mut(key.index)[idx] = orig + 1e-5;
            let up = loss(&b.classifier).0;
            b.classifier.params.value_mut(key.index)[idx] = orig - 1e-5;
            let down = loss(&b.classifier).0;
            b.classifier.params.value_mut(key.index)[idx] = orig;
            let numeric = (up - down) / 2e-5;
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-5, "{}: {a} vs {numeric}", b.classifier.params.name(key.index));
        }
    }
}
