//! Shared checks for the gradient and acceptance test targets.
#![allow(dead_code)]

use groundcount_core::autodiff::{Graph, ParamId, ParamStore, Var};
use groundcount_core::counters::rollout::{
    episode_terms, greedy_rollout, reward, sample_rollout, Action, Episode,
};
use groundcount_core::counters::heads::{
    huber_count_loss, IrlcHead, LstmBaselineHead, SoftCountHead, UpDownHead,
};
use groundcount_core::counters::{derive_rng, CountingModel, ModelDims, ModelKind, ObjectiveConfig, TrainContext};
use groundcount_core::data::{generate_synthetic_scene, SceneRecord, SynthConfig};
use groundcount_core::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use groundcount_core::grounding::GroundingHead;
use groundcount_core::language::{tokenize, EmbeddingTable, ObjectScorer, TextEncoder, Vocabulary};
use groundcount_core::nn::{dropout, Affine, Gtu, LstmCell, Mlp2};
use groundcount_core::tensor::Tensor;
use groundcount_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate reaches the loss
/// with a different weight.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape().to_vec();
    let w = random_tensor(&shape, &mut rng, -1.0, 1.0);
    let m = g.mul_const(out, w)?;
    Ok(g.sum(m))
}

fn run(store: &mut ParamStore, loss: impl Fn(&ParamStore, &mut Graph) -> Result<Var>) -> GradCheckReport {
    check_gradients(store, GradCheckOptions::default(), loss).unwrap()
}

/// One entry per primitive operation and layer: `(name, report)`.
pub fn op_gradient_suite() -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&[3, 4], &mut rng, -1.5, 1.5)).unwrap();
    let b = store.add("b", random_tensor(&[3, 4], &mut rng, -1.5, 1.5)).unwrap();
    let w = store.add("w", random_tensor(&[2, 4], &mut rng, -1.0, 1.0)).unwrap();
    let bias = store.add("bias", random_tensor(&[2], &mut rng, -1.0, 1.0)).unwrap();
    let v = store.add("v", random_tensor(&[4], &mut rng, -2.0, 2.0)).unwrap();
    let pos = store.add("pos", random_tensor(&[4], &mut rng, 0.2, 3.0)).unwrap();
    let alpha = store.add("alpha", random_tensor(&[3], &mut rng, -1.0, 1.0)).unwrap();
    let big = store.add("big", random_tensor(&[5], &mut rng, -3.0, 3.0)).unwrap();
    let col = store.add("col", random_tensor(&[3, 2], &mut rng, -1.0, 1.0)).unwrap();

    type Case = Box<dyn Fn(&ParamStore, &mut Graph) -> Result<Var>>;
    let p = |g: &mut Graph, id: ParamId| g.param(id);
    let cases: Vec<(&str, Case)> = vec![
        ("linear_vector", Box::new(move |_, g| {
            let (x, ww, bb) = (p(g, v), p(g, w), p(g, bias));
            let y = g.linear(x, ww, Some(bb))?;
            project(g, y, 1)
        })),
        ("linear_matrix", Box::new(move |_, g| {
            let (x, ww, bb) = (p(g, a), p(g, w), p(g, bias));
            let y = g.linear(x, ww, Some(bb))?;
            project(g, y, 2)
        })),
        ("add", Box::new(move |_, g| {
            let (x, y) = (p(g, a), p(g, b));
            let z = g.add(x, y)?;
            project(g, z, 3)
        })),
        ("sub", Box::new(move |_, g| {
            let (x, y) = (p(g, a), p(g, b));
            let z = g.sub(x, y)?;
            project(g, z, 4)
        })),
        ("mul", Box::new(move |_, g| {
            let (x, y) = (p(g, a), p(g, b));
            let z = g.mul(x, y)?;
            project(g, z, 5)
        })),
        ("mul_self", Box::new(move |_, g| {
            let x = p(g, v);
            let z = g.mul(x, x)?;
            project(g, z, 6)
        })),
        ("scale_offset_neg", Box::new(move |_, g| {
            let x = p(g, v);
            let s = g.scale(x, -2.5);
            let o = g.offset(s, 0.7);
            let n = g.neg(o);
            project(g, n, 7)
        })),
        ("tanh", Box::new(move |_, g| {
            let x = p(g, a);
            let y = g.tanh(x);
            project(g, y, 8)
        })),
        ("sigmoid", Box::new(move |_, g| {
            let x = p(g, a);
            let y = g.sigmoid(x);
            project(g, y, 9)
        })),
        ("relu", Box::new(move |_, g| {
            let x = p(g, a);
            let y = g.relu(x);
            project(g, y, 10)
        })),
        ("exp", Box::new(move |_, g| {
            let x = p(g, v);
            let y = g.exp(x);
            project(g, y, 11)
        })),
        ("log", Box::new(move |_, g| {
            let x = p(g, pos);
            let y = g.log(x);
            project(g, y, 12)
        })),
        ("huber_abs", Box::new(move |_, g| {
            let x = p(g, big);
            let y = g.huber_abs(x);
            project(g, y, 13)
        })),
        ("softmax", Box::new(move |_, g| {
            let x = p(g, big);
            let y = g.softmax(x)?;
            project(g, y, 14)
        })),
        ("log_softmax", Box::new(move |_, g| {
            let x = p(g, big);
            let y = g.log_softmax(x)?;
            project(g, y, 15)
        })),
        ("sum_mean", Box::new(move |_, g| {
            let x = p(g, a);
            let t = g.tanh(x);
            let s = g.sum(t);
            let m = g.mean(x);
            let both = g.concat(&[s, m]);
            project(g, both, 16)
        })),
        ("concat", Box::new(move |_, g| {
            let (x, y) = (p(g, v), p(g, big));
            let z = g.concat(&[x, y, x]);
            project(g, z, 17)
        })),
        ("concat_cols", Box::new(move |_, g| {
            let (x, y) = (p(g, a), p(g, col));
            let z = g.concat_cols(x, y)?;
            project(g, z, 18)
        })),
        ("broadcast_rows", Box::new(move |_, g| {
            let x = p(g, v);
            let z = g.broadcast_rows(x, 3)?;
            project(g, z, 19)
        })),
        ("gather", Box::new(move |_, g| {
            let x = p(g, big);
            let z = g.gather(x, &[4, 0, 4, 2])?;
            project(g, z, 20)
        })),
        ("gather_rows_row", Box::new(move |_, g| {
            let x = p(g, a);
            let z = g.gather_rows(x, &[2, 0, 2])?;
            let r = g.row(z, 1)?;
            let both = g.concat(&[r, z]);
            project(g, both, 21)
        })),
        ("reshape", Box::new(move |_, g| {
            let x = p(g, a);
            let z = g.reshape(x, vec![12])?;
            let t = g.tanh(z);
            project(g, t, 22)
        })),
        ("vec_mat", Box::new(move |_, g| {
            let (x, m) = (p(g, alpha), p(g, a));
            let z = g.vec_mat(x, m)?;
            project(g, z, 23)
        })),
        ("neg_log_prob", Box::new(move |_, g| {
            let x = p(g, big);
            let s = g.softmax(x)?;
            g.neg_log_prob(s, 3)
        })),
        ("cross_entropy_logits", Box::new(move |_, g| {
            let x = p(g, big);
            g.cross_entropy_logits(x, 1)
        })),
    ];
    let mut out = Vec::new();
    for (name, f) in cases {
        out.push((name.to_string(), run(&mut store, |s, g| f(s, g))));
    }
    out.extend(layer_suite());
    out
}

fn layer_suite() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x_vec = random_tensor(&[5], &mut rng, -1.0, 1.0);
    let x_mat = random_tensor(&[3, 5], &mut rng, -1.0, 1.0);

    let mut store = ParamStore::new();
    let aff = Affine::new(&mut store, "aff", 5, 3, &mut rng).unwrap();
    let xm = x_mat.clone();
    out.push(("affine".into(), run(&mut store, |_, g| {
        let x = g.constant(xm.clone());
        let y = aff.forward(g, x)?;
        project(g, y, 30)
    })));

    let mut store = ParamStore::new();
    let gtu = Gtu::new(&mut store, "gtu", 5, 4, &mut rng).unwrap();
    let xv = x_vec.clone();
    out.push(("gtu".into(), run(&mut store, |_, g| {
        let x = g.constant(xv.clone());
        let y = gtu.forward(g, x)?;
        project(g, y, 31)
    })));

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 5, 4, &mut rng).unwrap();
    // random biases so every gate is exercised away from zero
    for p in store.iter_mut() {
        if p.name.ends_with("bias") {
            p.value = random_tensor(p.value.shape(), &mut ChaCha8Rng::seed_from_u64(5), -0.5, 0.5);
        }
    }
    let seq = random_tensor(&[4, 5], &mut rng, -1.0, 1.0);
    out.push(("lstm".into(), run(&mut store, |_, g| {
        let s = g.constant(seq.clone());
        let steps = (0..4).map(|t| g.row(s, t)).collect::<Result<Vec<_>>>()?;
        let h = cell.run(g, &steps)?;
        project(g, h, 32)
    })));

    let mut store = ParamStore::new();
    let mlp = Mlp2::new(&mut store, "mlp", 5, 6, 2, &mut rng).unwrap();
    let xm = x_mat.clone();
    out.push(("mlp2".into(), run(&mut store, |_, g| {
        let x = g.constant(xm.clone());
        let y = mlp.forward(g, x)?;
        project(g, y, 33)
    })));

    let mut store = ParamStore::new();
    let aff = Affine::new(&mut store, "aff", 5, 4, &mut rng).unwrap();
    let xv = x_vec.clone();
    out.push(("dropout".into(), run(&mut store, |_, g| {
        let x = g.constant(xv.clone());
        let y = aff.forward(g, x)?;
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let d = dropout(g, y, 0.4, true, &mut r)?;
        project(g, d, 34)
    })));

    let mut store = ParamStore::new();
    let emb = EmbeddingTable::new(&mut store, "emb", 7, 3, &mut rng).unwrap();
    let enc = TextEncoder::new(&mut store, "enc", 3, 4, &mut rng).unwrap();
    out.push(("embedding_text_encoder".into(), run(&mut store, |_, g| {
        let h = enc.encode(g, &emb, &[2, 5, 2, 6])?;
        project(g, h, 35)
    })));

    let mut store = ParamStore::new();
    let scorer = ObjectScorer::new(&mut store, "scorer", 4, 5, 6, &mut rng).unwrap();
    let ground = GroundingHead::new(&mut store, 6, &mut rng).unwrap();
    let q0 = random_tensor(&[4], &mut rng, -1.0, 1.0);
    let feats = x_mat.clone();
    out.push(("scorer_grounding".into(), run(&mut store, |_, g| {
        let q = g.constant(q0.clone());
        let s = scorer.score(g, q, &feats)?;
        let l = ground.logits(g, s)?;
        g.cross_entropy_logits(l, 2)
    })));

    let scores = random_tensor(&[3, 6], &mut rng, -1.0, 1.0);
    let mut store = ParamStore::new();
    let sc = SoftCountHead::new(&mut store, 6, &mut rng).unwrap();
    let s0 = scores.clone();
    out.push(("softcount_head".into(), run(&mut store, |_, g| {
        let s = g.constant(s0.clone());
        let (_, raw) = sc.forward(g, s)?;
        Ok(huber_count_loss(g, raw, 3))
    })));

    let mut store = ParamStore::new();
    let ud = UpDownHead::new(&mut store, 6, 5, 4, 4, &mut rng).unwrap();
    let (s0, f0, q1) = (scores.clone(), x_mat.clone(), q0.clone());
    out.push(("updown_head".into(), run(&mut store, |_, g| {
        let s = g.constant(s0.clone());
        let (_, v_hat) = ud.attend(g, s, &f0)?;
        let q = g.constant(q1.clone());
        let logits = ud.classify(g, v_hat, q)?;
        g.cross_entropy_logits(logits, 2)
    })));

    let mut store = ParamStore::new();
    let lb = LstmBaselineHead::new(&mut store, 4, &mut rng).unwrap();
    let q1 = q0.clone();
    out.push(("lstm_baseline_head".into(), run(&mut store, |_, g| {
        let q = g.constant(q1.clone());
        let raw = lb.forward(g, q)?;
        let shifted = g.offset(raw, 2.3);
        Ok(huber_count_loss(g, shifted, 1))
    })));

    let scene = small_scene(5);
    let mut store = ParamStore::new();
    let ir = IrlcHead::new(&mut store, 6, 4, 3, 5, &mut rng).unwrap();
    let n = scene.num_objects();
    let s_irlc = random_tensor(&[n, 6], &mut rng, -1.0, 1.0);
    let q1 = q0.clone();
    out.push(("irlc_head_episode".into(), run(&mut store, |_, g| {
        let s = g.constant(s_irlc.clone());
        let k = ir.initial_logits(g, s)?;
        let q = g.constant(q1.clone());
        let rho = ir.interactions(g, q, &scene)?;
        let z = ir.zeta(g);
        let ep = sample_rollout(
            g.value(k).data(),
            g.scalar(z),
            g.value(rho),
            n,
            &mut ChaCha8Rng::seed_from_u64(12),
        )?;
        let t = episode_terms(g, k, z, rho, &ep)?;
        let parts = g.concat(&[t.log_prob_sum, t.entropy_penalty, t.interaction_penalty]);
        project(g, parts, 36)
    })));
    out
}

/// A synthetic scene with at most `max_n` proposals.
pub fn small_scene(max_n: usize) -> SceneRecord {
    let cfg = SynthConfig {
        min_objects: 2,
        max_objects: 3,
        ..SynthConfig::default()
    };
    for i in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let s = generate_synthetic_scene(&cfg, "grad", &mut rng).unwrap();
        if (2..=max_n).contains(&s.num_objects()) {
            return s;
        }
    }
    unreachable!()
}

/// Full-model checks (desk dimensions, random init, one scene with at most six
/// proposals): counting loss with dropout for every trainable model, plus the
/// grounding loss.
pub fn model_gradient_suite() -> Vec<(String, GradCheckReport)> {
    let scene = small_scene(6);
    let question = tokenize("how many squares are there");
    let caption = tokenize("a square");
    let vocab = Vocabulary::build([question.as_slice(), caption.as_slice()]);
    let mut out = Vec::new();
    for kind in [ModelKind::SoftCount, ModelKind::UpDown, ModelKind::Irlc, ModelKind::Lstm] {
        let mut model = CountingModel::new(kind, ModelDims::desk(kind), vocab.clone(), 17).unwrap();
        let ids = model.token_ids(&question);
        let cap_ids = model.token_ids(&caption);
        let objective = ObjectiveConfig::default();
        let gt = 2;
        let sc = scene.clone();
        let obj = objective.clone();
        let ids2 = ids.clone();
        let report = check_gradients(&mut model, GradCheckOptions::default(), move |m, g| {
            let mut rng = derive_rng(5, 0, 0);
            let ctx = TrainContext { objective: &obj, rng: &mut rng };
            Ok(m.counting_loss(g, &sc, &ids2, gt, ctx)?.total)
        })
        .unwrap();
        out.push((format!("model_{}", kind.name()), report));
        if kind == ModelKind::SoftCount {
            let sc = scene.clone();
            let report = check_gradients(&mut model, GradCheckOptions::default(), move |m, g| {
                let pairs = vec![(cap_ids.clone(), 0), (cap_ids.clone(), sc.num_objects() - 1)];
                Ok(m.grounding_loss(g, &sc, &pairs)?.expect("scene has proposals"))
            })
            .unwrap();
            out.push(("model_grounding".into(), report));
        }
    }
    out
}

/// Fixed enumerable instance for the self-critical estimator.
pub struct ToyPolicy {
    pub kappa0: Vec<f64>,
    pub zeta: f64,
    pub rho: Tensor,
    pub gt: u32,
}

impl ToyPolicy {
    pub fn standard() -> Self {
        Self {
            kappa0: vec![0.8, 0.1, -0.4],
            zeta: 0.2,
            rho: Tensor::matrix(3, 3, vec![0.0, -0.6, 0.3, 0.4, 0.0, -1.2, -0.2, 0.5, 0.0]).unwrap(),
            gt: 1,
        }
    }

    fn store(&self) -> (ParamStore, ParamId, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let k = s.add("kappa0", Tensor::vector(self.kappa0.clone())).unwrap();
        let z = s.add("zeta", Tensor::vector(vec![self.zeta])).unwrap();
        let r = s.add("rho", self.rho.clone()).unwrap();
        (s, k, z, r)
    }

    /// `(−R Σ log p)` gradient of one episode, flattened over `[κ⁰, ζ, ρ]`,
    /// together with the episode's probability.
    fn episode_gradient(&self, ep: &Episode, greedy: &Episode) -> (Vec<f64>, f64) {
        let (store, k, z, r) = self.store();
        let mut g = Graph::new(&store);
        let (kv, zv, rv) = (g.param(k), g.param(z), g.param(r));
        let t = episode_terms(&mut g, kv, zv, rv, ep).unwrap();
        let prob = g.scalar(t.log_prob_sum).exp();
        let loss = g.scale(t.log_prob_sum, -reward(ep, greedy, self.gt));
        let grads = g.backward(loss).unwrap();
        let mut flat = Vec::new();
        for id in [k, z, r] {
            match grads.get(id) {
                Some(t) => flat.extend_from_slice(t.data()),
                None => flat.extend(std::iter::repeat(0.0).take(store.value(id).len())),
            }
        }
        (flat, prob)
    }

    /// Every action sequence with its episode record.
    pub fn all_episodes(&self) -> Vec<Episode> {
        let n = self.kappa0.len();
        let mut out = Vec::new();
        let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
        while let Some(prefix) = stack.pop() {
            let mut actions: Vec<Action> = prefix.iter().map(|&a| Action::Object(a)).collect();
            actions.push(Action::Terminal);
            out.push(Episode {
                kappa_trajectory: Vec::new(),
                zeta: self.zeta,
                actions,
                step_distributions: Vec::new(),
                log_probs: Vec::new(),
                count: prefix.len(),
                selected: prefix.clone(),
                cap: n,
            });
            if prefix.len() < n {
                for a in (0..n).filter(|a| !prefix.contains(a)) {
                    let mut next = prefix.clone();
                    next.push(a);
                    stack.push(next);
                }
            }
        }
        out
    }

    /// `(exhaustive gradient, Monte-Carlo gradient, total enumerated probability)`.
    pub fn gradients(&self, samples: usize, seed: u64) -> (Vec<f64>, Vec<f64>, f64) {
        let n = self.kappa0.len();
        let greedy = greedy_rollout(&self.kappa0, self.zeta, &self.rho, n).unwrap();
        let dim = n + 1 + n * n;
        let mut exact = vec![0.0; dim];
        let mut mass = 0.0;
        for ep in self.all_episodes() {
            let (grad, prob) = self.episode_gradient(&ep, &greedy);
            mass += prob;
            for (e, gi) in exact.iter_mut().zip(grad) {
                *e += prob * gi;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mc = vec![0.0; dim];
        for _ in 0..samples {
            let ep = sample_rollout(&self.kappa0, self.zeta, &self.rho, n, &mut rng).unwrap();
            let (grad, _) = self.episode_gradient(&ep, &greedy);
            for (m, gi) in mc.iter_mut().zip(grad) {
                *m += gi / samples as f64;
            }
        }
        (exact, mc, mass)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
