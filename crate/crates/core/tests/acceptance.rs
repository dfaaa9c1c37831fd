//! End-to-end acceptance checks. Prints one PASS / FAIL / SKIP line per
//! criterion and exits non-zero if any criterion fails.

mod common;

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{model_gradient_suite, op_gradient_suite, cosine, ToyPolicy, GRAD_TOLERANCE};
use groundcount_core::counters::rollout::{default_cap, greedy_rollout, sample_rollout};
use groundcount_core::counters::ModelKind;
use groundcount_core::data::{filter_howmany, generate_synthetic_scene, load_vqa_annotations, FilterReason, SynthConfig};
use groundcount_core::eval::{grounding_quality, vqa_accuracy, GroundingObservation, Quality};
use groundcount_core::geometry::BBox;
use groundcount_core::harness::evaluate::duplicate_interaction;
use groundcount_core::harness::{cmd_train_on, load_dataset, RunConfig};
use groundcount_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Criterion {
    name: &'static str,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut reports = op_gradient_suite();
    reports.extend(model_gradient_suite());
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("suite is not empty");
    let checked: usize = reports.iter().map(|r| r.1.checked).sum();
    let ok = worst.1.max_rel_error < GRAD_TOLERANCE && elapsed < Duration::from_secs(120);
    check(
        ok,
        format!(
            "{} cases, {checked} coordinates, worst {} rel err {:.2e} (< {GRAD_TOLERANCE:e}), {:.1}s (< 120s)",
            reports.len(),
            worst.0,
            worst.1.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn selfcritical_oracle() -> Outcome {
    let start = Instant::now();
    let toy = ToyPolicy::standard();
    let (exact, mc, mass) = toy.gradients(10_000, 42);
    let cos = cosine(&exact, &mc);
    let elapsed = start.elapsed();
    check(
        cos > 0.99 && (mass - 1.0).abs() < 1e-12 && elapsed < Duration::from_secs(60),
        format!(
            "cosine {cos:.5} (> 0.99) over 10^4 episodes, enumerated mass {mass:.12}, {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn suppression_task() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("temp dir");
    let base = RunConfig { seed: 0, ..RunConfig::default() };
    let data = match base.resolve().and_then(|c| load_dataset(&c)) {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(format!("dataset: {e}")),
    };
    let mut acc = HashMap::new();
    let mut detail = Vec::new();
    let mut irlc_rmse = f64::INFINITY;
    let mut dup_rho = None;
    for kind in [ModelKind::Guess1, ModelKind::SoftCount, ModelKind::Irlc] {
        let cfg = RunConfig { model: kind, out: dir.path().join(kind.name()), ..base.clone() };
        let cfg = match cfg.resolve() {
            Ok(c) => c,
            Err(e) => return Outcome::Fail(format!("config: {e}")),
        };
        let report = match cmd_train_on(&cfg, &data, &mut |_| {}) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("{} training: {e}", kind.name())),
        };
        acc.insert(kind, report.dev.accuracy);
        detail.push(format!(
            "{} acc {:.3} rmse {:.3} (best epoch {})",
            kind.name(),
            report.dev.accuracy,
            report.dev.rmse,
            report.best_epoch
        ));
        if kind == ModelKind::Irlc {
            irlc_rmse = report.dev.rmse;
            dup_rho = duplicate_interaction(&report.model, &data, &data.dev, cfg.execution()).ok().flatten();
        }
    }
    let elapsed = start.elapsed();
    let g = acc[&ModelKind::Guess1];
    let (s, i) = (acc[&ModelKind::SoftCount], acc[&ModelKind::Irlc]);
    let rho_ok = dup_rho.is_some_and(|r| r < 0.0);
    let ok = s >= 0.90
        && i >= 0.90
        && irlc_rmse <= 0.5
        && rho_ok
        && s - g >= 0.30
        && i - g >= 0.30
        && elapsed < Duration::from_secs(15 * 60);
    detail.push(format!("duplicate rho {}", dup_rho.map_or("n/a".into(), |r| format!("{r:.3}"))));
    detail.push(format!("{:.0}s (< 900s)", elapsed.as_secs_f64()));
    check(ok, detail.join("; "))
}

fn episode_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_sum = 0.0f64;
    for case in 0..10_000 {
        let n = rng.random_range(0..=25usize);
        let kappa: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let zeta = rng.random_range(-6.0..6.0);
        let rho = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let cap = default_cap(n);
        let greedy = greedy_rollout(&kappa, zeta, &rho, cap).unwrap();
        let sampled = sample_rollout(&kappa, zeta, &rho, cap, &mut rng).unwrap();
        for ep in [&greedy, &sampled] {
            if ep.count > n.min(20) {
                return Outcome::Fail(format!("case {case}: count {} > min({n}, 20)", ep.count));
            }
            let mut seen = vec![false; n];
            for &a in &ep.selected {
                if std::mem::replace(&mut seen[a], true) {
                    return Outcome::Fail(format!("case {case}: object {a} selected twice"));
                }
            }
            for p in &ep.step_distributions {
                worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let shift = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = kappa.iter().map(|k| k + shift).collect();
        let moved = greedy_rollout(&shifted, zeta + shift, &rho, cap).unwrap();
        if moved.actions != greedy.actions {
            return Outcome::Fail(format!("case {case}: greedy rollout changed under a joint shift of {shift}"));
        }
    }
    check(
        worst_sum <= 1e-12,
        format!("10^4 instances, counts bounded, no repeats, shift invariant, max |Σp − 1| = {worst_sum:.1e}"),
    )
}

/// Independent answer matcher for the oracle.
fn oracle_matches(answer: &str, c: u32) -> bool {
    const WORDS: [&str; 6] = ["zero", "one", "two", "three", "four", "five"];
    let a = answer.trim().to_lowercase();
    a == c.to_string() || WORDS.get(c as usize).is_some_and(|w| *w == a)
}

/// Mean over the ten leave-one-out subsets of min(matches / 3, 1), kept as an
/// exact fraction over 30.
fn brute_force_accuracy(predicted: u32, answers: &[String]) -> f64 {
    let mut numerator = 0u32;
    for left_out in 0..answers.len() {
        let m = answers
            .iter()
            .enumerate()
            .filter(|(i, a)| *i != left_out && oracle_matches(a, predicted))
            .count() as u32;
        numerator += m.min(3);
    }
    numerator as f64 / 30.0
}

fn accuracy_oracle() -> Outcome {
    let pool = ["0", "1", "2", "3", "two", "Three", " 2 ", "ONE", "4", "many", "five"];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..10_000 {
        let answers: Vec<String> = (0..10).map(|_| pool[rng.random_range(0..pool.len())].to_string()).collect();
        let predicted = rng.random_range(0..6u32);
        let lib = vqa_accuracy(predicted, &answers).unwrap();
        let oracle = brute_force_accuracy(predicted, &answers);
        if lib != oracle {
            return Outcome::Fail(format!("case {case}: library {lib} vs enumeration {oracle} for {answers:?}"));
        }
    }
    let mut three: Vec<String> = vec!["2".into(); 3];
    three.extend(vec!["4".to_string(); 7]);
    three.shuffle(&mut rng);
    let k3 = vqa_accuracy(2, &three).unwrap();
    check(k3 == 0.9, format!("10^4 random cases equal exactly; k=3 gives {k3}"))
}

const FILTER_FIXTURE: [(&str, &str, FilterReason); 40] = {
    use FilterReason::*;
    [
        ("How many dogs are there?", "2", Keep),
        ("How many people are in the picture?", "three", Keep),
        ("What is the number of cars?", "4", Keep),
        ("What number of birds are flying?", "0", Keep),
        ("What is the amount of plates on the table?", "5", Keep),
        ("What is the count of zebras?", "20", Keep),
        ("HOW MANY CATS???", "1", Keep),
        ("how many windows does the building have", "twenty", Keep),
        ("How many giraffes?", " 7 ", Keep),
        ("Count of sheep in the field?", "12", Keep),
        ("How many slices of pizza are left?", "0", Keep),
        ("What's the number of horses?", "3", Keep),
        ("How many skiers are visible", "Six", Keep),
        // time
        ("What time is it?", "3:00", NoPhrase),
        ("What time does the clock say?", "10:10", NoPhrase),
        // general number answers
        ("What is the speed limit?", "35", NoPhrase),
        ("What year is it?", "2010", NoPhrase),
        ("What is the score?", "2", NoPhrase),
        ("How old is the man?", "30", NoPhrase),
        ("What number is on the jersey?", "23", NoPhrase),
        ("How much does the bike cost?", "100", NoPhrase),
        ("Somehow many dogs are here", "2", NoPhrase),
        ("How mny dogs", "2", NoPhrase),
        // reading numbers
        ("What is the number of the bus?", "42", RejectPhrase),
        ("What is the number of the train?", "7", RejectPhrase),
        ("What's the number of the player on the left?", "10", RejectPhrase),
        ("Number of the house?", "5", RejectPhrase),
        ("How many people are waiting for the number of the bus?", "3", RejectPhrase),
        ("What is the number of the flight", "ua 123", RejectPhrase),
        // ballparking
        ("How many people live in this city?", "thousands", NonNumeric),
        ("How many birds are there?", "lots", NonNumeric),
        ("How many calories are in this?", "many", NonNumeric),
        ("How many sheep?", "2.5", NonNumeric),
        ("How many cars are parked?", "a few", NonNumeric),
        ("How many zebras?", "2 or 3", NonNumeric),
        // counts outside 0..=20
        ("How many windows are there?", "25", OutOfRange),
        ("How many people are in the stadium?", "1000", OutOfRange),
        ("How many kites?", "-1", OutOfRange),
        ("How many bananas?", "21", OutOfRange),
        ("What is the amount of money?", "100", OutOfRange),
    ]
};

fn filter_fixture() -> Outcome {
    let wrong: Vec<String> = FILTER_FIXTURE
        .iter()
        .filter(|(q, a, want)| filter_howmany(q, a) != *want)
        .map(|(q, a, want)| format!("{q:?}/{a:?}: got {}, want {want}", filter_howmany(q, a)))
        .collect();
    let mut per_reason: HashMap<FilterReason, usize> = HashMap::new();
    for (_, _, r) in &FILTER_FIXTURE {
        *per_reason.entry(*r).or_default() += 1;
    }
    check(
        wrong.is_empty() && per_reason.len() == FilterReason::ALL.len(),
        if wrong.is_empty() {
            format!("40/40 agree, all {} outcomes covered", per_reason.len())
        } else {
            wrong.join("; ")
        },
    )
}

fn vqa_train_keep_count() -> Outcome {
    let (Ok(q), Ok(a)) = (
        std::env::var("GROUNDCOUNT_VQA_TRAIN_QUESTIONS"),
        std::env::var("GROUNDCOUNT_VQA_TRAIN_ANNOTATIONS"),
    ) else {
        return Outcome::Skip(
            "set GROUNDCOUNT_VQA_TRAIN_QUESTIONS and GROUNDCOUNT_VQA_TRAIN_ANNOTATIONS to the VQA 2.0 train files".into(),
        );
    };
    let open = |p: &str| File::open(Path::new(p)).map(BufReader::new);
    let (qf, af) = match (open(&q), open(&a)) {
        (Ok(qf), Ok(af)) => (qf, af),
        (Err(e), _) | (_, Err(e)) => return Outcome::Fail(format!("cannot open VQA files: {e}")),
    };
    let (records, warnings) = match load_vqa_annotations(qf, af) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("loading VQA files: {e}")),
    };
    let kept = records.iter().filter(|r| filter_howmany(&r.question, &r.consensus) == FilterReason::Keep).count();
    check(kept == 47_542, format!("kept {kept} of {} (want 47542), {} load warnings", records.len(), warnings.len()))
}

fn grounding_endpoints() -> Outcome {
    let cfg = SynthConfig { min_objects: 1, ..SynthConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut embeddings = HashMap::new();
    for (i, name) in cfg.category_names().iter().enumerate() {
        let mut v = vec![0.0; 16];
        v[i] = 1.0;
        embeddings.insert(name.to_string(), v);
    }
    let scenes: Vec<_> = (0..200)
        .map(|i| generate_synthetic_scene(&cfg, &format!("g{i}"), &mut rng).unwrap())
        .collect();
    // A tiny box in the corner overlaps no labeled object.
    let background = BBox::new(0.0, 0.0, 0.004, 0.004).unwrap();
    let mut perfect = Vec::new();
    let mut backdrop = Vec::new();
    for s in &scenes {
        let labels = s.labels.as_ref().unwrap();
        let mut boxes = s.boxes.clone();
        boxes.push(background);
        for gt in &s.ground_truth {
            let cat = gt.category.as_str();
            if !cfg.category_names().contains(&cat) {
                continue;
            }
            let mut w: Vec<f64> = labels.iter().map(|l| f64::from(u8::from(l.category.as_deref() == Some(cat)))).collect();
            w.push(0.0);
            perfect.push((cat, w, boxes.clone(), s.ground_truth.clone()));
            let mut b = vec![0.0; s.num_objects()];
            b.push(1.0);
            backdrop.push((cat, b, boxes.clone(), s.ground_truth.clone()));
        }
    }
    let score = |obs: &[(&str, Vec<f64>, Vec<BBox>, Vec<_>)]| {
        let o: Vec<GroundingObservation> = obs
            .iter()
            .map(|(c, w, b, g)| GroundingObservation { category: c, weights: w, boxes: b, ground_truth: g })
            .collect();
        grounding_quality(&o, &embeddings).unwrap()
    };
    let p = score(&perfect);
    let b = score(&backdrop);
    let p_ok = !p.is_empty() && p.values().all(|q| *q == Quality::Defined(1.0));
    let b_ok = !b.is_empty() && b.values().all(|q| *q == Quality::Defined(0.0));
    check(
        p_ok && b_ok,
        format!("perfect counter {:?}; background counter {:?}", p.values().collect::<Vec<_>>(), b.values().collect::<Vec<_>>()),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let run = |name: &str, parallel: bool| -> groundcount_core::Result<(String, String)> {
        let cfg = RunConfig {
            model: ModelKind::Irlc,
            train_scenes: 120,
            dev_scenes: 40,
            test_scenes: 10,
            max_epochs: Some(2),
            seed: 11,
            parallel,
            out: dir.path().join(name),
            ..RunConfig::default()
        }
        .resolve()?;
        let data = load_dataset(&cfg)?;
        cmd_train_on(&cfg, &data, &mut |_| {})?;
        let read = |f: &str| std::fs::read_to_string(cfg.out.join(f)).map_err(groundcount_core::Error::from);
        Ok((read("metrics.csv")?, read("train_log.csv")?))
    };
    let (a, b, c) = match (run("a", true), run("b", true), run("c", false)) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return Outcome::Fail(format!("training: {e}")),
    };
    check(
        a == b && a == c,
        format!(
            "two identical runs {} metric CSVs; sequential run {}",
            if a == b { "produce identical" } else { "differ in" },
            if a == c { "matches" } else { "differs" }
        ),
    )
}

fn main() {
    let criteria = [
        Criterion { name: "gradient suite", run: gradient_suite },
        Criterion { name: "self-critical oracle", run: selfcritical_oracle },
        Criterion { name: "episode invariants", run: episode_invariants },
        Criterion { name: "accuracy oracle", run: accuracy_oracle },
        Criterion { name: "filter fixture", run: filter_fixture },
        Criterion { name: "filter keep-count on VQA 2.0 train", run: vqa_train_keep_count },
        Criterion { name: "grounding-quality endpoints", run: grounding_endpoints },
        Criterion { name: "determinism", run: determinism },
        Criterion { name: "synthetic suppression task", run: suppression_task },
    ];
    let only = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.as_deref().is_none_or(|o| c.name.contains(o))) {
        let (tag, detail) = match (c.run)() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {}: {detail}", c.name);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
