#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robad_core::attacks::{AttackKind, AttackSpec, Attacker};
use robad_core::losses::{cross_entropy_var, info_nce_var, total_loss_var};
use robad_core::model::{bind, init_params, Forward, ModelParams, Params};
use robad_core::{Graph, ModelConfig, Post, Result, Tensor, UserSequence, Var, Variant};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative error, so that gradients that are zero up
/// to rounding compare on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// `Σ R ⊙ op(inputs)` for a fixed random `R`, so every output element
/// contributes a distinct weight to the scalar.
fn weighted(op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static, seed: u64) -> Build {
    Box::new(move |g: &mut Graph, xs: &[Var]| {
        let y = op(g, xs)?;
        let shape = g.shape(y).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        let p = g.mul(y, r)?;
        g.sum(p)
    })
}

/// Central-difference check of `build` at `inputs`; returns the largest
/// relative error over every input element.
pub fn fd_check(inputs: &[Tensor], build: &Build) -> f64 {
    let eval = |ts: &[Tensor], trainable: bool| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(trainable)))
            .collect();
        let loss = build(&mut g, &vars).expect("loss builds");
        (g, vars, loss)
    };
    let (mut g, vars, loss) = eval(inputs, true);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let (gp, _, lp) = eval(&plus, false);
            let (gm, _, lm) = eval(&minus, false);
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Every differentiable graph operation with inputs placed away from kinks
/// and domain edges.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, -1.0, 1.0);
    let pos = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let away = |t: &Tensor| {
        let d = t
            .data()
            .iter()
            .map(|&v| if v.abs() < 0.1 { v + 0.3 } else { v })
            .collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let a34 = r(&[3, 4]);
    let b45 = r(&[4, 5]);
    let b54 = r(&[5, 4]);
    let c34 = r(&[3, 4]);
    let bias4 = r(&[4]);
    let x235 = r(&[2, 3, 5]);
    let table = r(&[6, 4]);
    let u = r(&[5]);
    let v = r(&[5]);
    let big = r(&[5, 6]);
    let relu_in = away(&r(&[3, 4]));
    let ln_in = pos(&r(&[3, 4]));
    let clamp_in = away(&r(&[3, 4]));
    let gain = pos(&r(&[4]));
    let probs = {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d: Vec<f64> = (0..4)
            .flat_map(|_| {
                let p: f64 = rng.gen_range(0.05..0.95);
                [1.0 - p, p]
            })
            .collect();
        Tensor::new(vec![4, 2], d).unwrap()
    };
    let probs3 = Tensor::from_rows(&[probs.row(0), probs.row(1), probs.row(2)]).unwrap();
    let z1 = r(&[3, 4]);
    let z2 = r(&[3, 4]);
    let top = Tensor::from_rows(&[big.row(0), big.row(1), big.row(2)]).unwrap();
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3 || i == 3).collect();

    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    let mut add = |name, inputs, op: Build| cases.push((name, inputs, op));
    add(
        "matmul",
        vec![a34.clone(), b45],
        weighted(|g, x| g.matmul(x[0], x[1]), 1),
    );
    add(
        "matmul_nt",
        vec![a34.clone(), b54],
        weighted(|g, x| g.matmul_nt(x[0], x[1]), 2),
    );
    add("transpose", vec![a34.clone()], weighted(|g, x| g.transpose(x[0]), 3));
    add(
        "add",
        vec![a34.clone(), c34.clone()],
        weighted(|g, x| g.add(x[0], x[1]), 4),
    );
    add(
        "sub",
        vec![a34.clone(), c34.clone()],
        weighted(|g, x| g.sub(x[0], x[1]), 5),
    );
    add(
        "mul",
        vec![a34.clone(), c34.clone()],
        weighted(|g, x| g.mul(x[0], x[1]), 6),
    );
    add(
        "add_row",
        vec![a34.clone(), bias4.clone()],
        weighted(|g, x| g.add_row(x[0], x[1]), 7),
    );
    add(
        "affine",
        vec![a34.clone()],
        weighted(|g, x| g.affine(x[0], -1.7, 0.3), 8),
    );
    add("scale", vec![a34.clone()], weighted(|g, x| g.scale(x[0], 2.5), 9));
    add("relu", vec![relu_in], weighted(|g, x| g.relu(x[0]), 10));
    add("exp", vec![a34.clone()], weighted(|g, x| g.exp(x[0]), 11));
    add("ln", vec![ln_in], weighted(|g, x| g.ln(x[0]), 12));
    add("clamp", vec![clamp_in], weighted(|g, x| g.clamp(x[0], -0.5, 0.5), 13));
    add("sum", vec![a34.clone()], weighted(|g, x| g.sum(x[0]), 14));
    add("mean", vec![a34.clone()], weighted(|g, x| g.mean(x[0]), 15));
    add(
        "mean_axis",
        vec![x235.clone()],
        weighted(|g, x| g.mean_axis(x[0], 1), 16),
    );
    add(
        "softmax",
        vec![a34.clone()],
        weighted(|g, x| g.softmax_lastdim(x[0]), 17),
    );
    add(
        "masked_softmax",
        vec![a34.clone()],
        weighted(move |g, x| g.masked_softmax(x[0], &mask), 18),
    );
    add(
        "layer_norm",
        vec![a34.clone(), gain, bias4.clone()],
        weighted(|g, x| g.layer_norm(x[0], x[1], x[2]), 19),
    );
    add(
        "normalize_rows",
        vec![a34.clone()],
        weighted(|g, x| g.normalize_rows(x[0]), 20),
    );
    add("cosine_sim", vec![u, v], weighted(|g, x| g.cosine_sim(x[0], x[1]), 21));
    add(
        "embedding_rows",
        vec![table],
        weighted(|g, x| g.embedding_rows(x[0], &[2, 0, 2, 5]), 22),
    );
    add(
        "gather_elems",
        vec![a34.clone()],
        weighted(|g, x| g.gather_elems(x[0], &[0, 5, 5, 11]), 23),
    );
    add(
        "slice",
        vec![big.clone()],
        weighted(|g, x| g.slice(x[0], 1, 3, 2, 3), 24),
    );
    add(
        "concat_rows",
        vec![a34.clone(), c34.clone()],
        weighted(|g, x| g.concat_rows(&[x[0], x[1]]), 25),
    );
    add(
        "concat_cols",
        vec![a34.clone(), top],
        weighted(|g, x| g.concat_cols(&[x[0], x[1]]), 26),
    );
    add(
        "segment_mean",
        vec![big],
        weighted(|g, x| g.segment_mean(x[0], &[(0, 2), (2, 3)]), 27),
    );
    add("reshape", vec![x235], weighted(|g, x| g.reshape(x[0], &[6, 5]), 28));
    add(
        "cross_entropy",
        vec![probs.clone()],
        Box::new(|g, x| cross_entropy_var(g, x[0], &[1, 0, 0, 1])),
    );
    add(
        "info_nce",
        vec![z1.clone(), z2.clone()],
        Box::new(|g, x| info_nce_var(g, x[0], x[1], 0.7)),
    );
    add(
        "total_loss",
        vec![z1, z2, probs3],
        Box::new(|g, x| {
            let nce = info_nce_var(g, x[0], x[1], 1.0)?;
            let ce = cross_entropy_var(g, x[2], &[1, 0, 1])?;
            total_loss_var(g, ce, nce, 0.3)
        }),
    );
    cases
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        tokens_per_post: 4,
        window: 3,
        emb_dim: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_mult: 2,
        dropout: 0.0,
        variant,
    }
}

/// Random users for the tiny config: 1..=3 posts of 1..=4 tokens each.
pub fn tiny_users(n: usize, seed: u64) -> Vec<UserSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|u| {
            let posts = (0..rng.gen_range(1..=3))
                .map(|_| {
                    let len = rng.gen_range(1..=4);
                    let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(2..20)).collect();
                    Post::from_ids(&ids, 4)
                })
                .collect();
            UserSequence {
                user_id: format!("u{u}"),
                label: (u % 2) as u8,
                posts,
            }
        })
        .collect()
}

/// The full adversary-aware objective on `users` and their copy-append views.
pub fn full_objective(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Params<Var>,
    users: &[UserSequence],
    attacked: &[UserSequence],
) -> Var {
    let refs: Vec<&UserSequence> = users.iter().chain(attacked).collect();
    let out = Forward::new(g, p, cfg).forward_users(&refs).unwrap();
    let n = users.len();
    let y: Vec<u8> = users.iter().map(|u| u.label).collect();
    let po = g.slice(out.probs, 0, n, 0, 2).unwrap();
    let pa = g.slice(out.probs, n, n, 0, 2).unwrap();
    let zo = g.slice(out.z, 0, n, 0, cfg.emb_dim).unwrap();
    let za = g.slice(out.z, n, n, 0, cfg.emb_dim).unwrap();
    let ce = cross_entropy_var(g, po, &y).unwrap();
    let ce_a = cross_entropy_var(g, pa, &y).unwrap();
    let clf = g.add(ce, ce_a).unwrap();
    let nce = info_nce_var(g, zo, za, 1.0).unwrap();
    total_loss_var(g, clf, nce, 0.1).unwrap()
}

/// Finite-difference check of the end-to-end objective on `n_checks`
/// randomly chosen scalar parameters. Returns (worst relative error, count).
pub fn end_to_end_check(variant: Variant, n_checks: usize, seed: u64) -> (f64, usize) {
    let cfg = tiny_config(variant);
    let params = init_params(&cfg, seed).unwrap();
    let users = tiny_users(4, seed);
    let attacked = Attacker::new(AttackSpec::new(AttackKind::NgramGen, seed), &users)
        .unwrap()
        .attack_all(&users, cfg.window, cfg.tokens_per_post)
        .unwrap();

    let mut g = Graph::new();
    let bound = bind(&mut g, &params, true);
    let loss = full_objective(&mut g, &cfg, &bound, &users, &attacked);
    g.backward(loss).unwrap();
    let leaves: Vec<Var> = bound.named().iter().map(|(_, &v)| v).collect();
    let named = params.named();
    let sizes: Vec<usize> = named.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();

    let value_at = |p: &ModelParams| {
        let mut g = Graph::new();
        let bound = bind(&mut g, p, false);
        let l = full_objective(&mut g, &cfg, &bound, &users, &attacked);
        g.scalar(l)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut tries = 0;
    while checked < n_checks && tries < 50 * n_checks {
        tries += 1;
        let mut flat = rng.gen_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let leaf = leaves[k];
        let analytic = g.grad(leaf).map_or(0.0, |gr| gr[flat]);
        let mut plus = params.clone();
        plus.values_mut()[k].data_mut()[flat] += FD_STEP;
        let mut minus = params.clone();
        minus.values_mut()[k].data_mut()[flat] -= FD_STEP;
        let numeric = (value_at(&plus) - value_at(&minus)) / (2.0 * FD_STEP);
        // Embedding rows of unused tokens have exactly zero gradient; keep
        // sampling until enough parameters that actually influence the loss
        // have been compared.
        if analytic == 0.0 && numeric == 0.0 {
            continue;
        }
        worst = worst.max(rel_err(analytic, numeric));
        checked += 1;
    }
    (worst, checked)
}
