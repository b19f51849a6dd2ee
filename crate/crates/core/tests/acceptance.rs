//! Acceptance criteria, one line each.
//!
//! Runs every check in order and prints `PASS` or `FAIL` per criterion with
//! the measured values. The process exits 0 so a full `cargo test` run
//! reports all lines; set `GMC_ACCEPTANCE_STRICT=1` to exit 1 on any failure.
//! `GMC_ACCEPTANCE_ONLY=1,2,8` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gmc::energy::{match_sides, min_energy_match, EnergyConfig, MatchSide, EMBED_DIM};
use gmc::field::UnaryField;
use gmc::isometry::{edge_isometry_loss, EdgeSet, NeighborGraph, DEFAULT_K};
use gmc::kdtree::KdTree;
use gmc::metrics::{emd, evaluate_sweep, mped, MetricConfig, DEFAULT_MPED_FRACTIONS};
use gmc::motion::StraightLineMotion;
use gmc::nn::Activation;
use gmc::synthgen::{self, presets, Scene};
use gmc::trainer::{canonical_spread, loss_and_gradients, Batch, TrainCloud, TrainReport};
use gmc::{geometry::slerp, prepare_pair, MotionModel, Quaternion, TrainConfig, Trainer, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = anyhow::Result<(bool, String)>;

/// Iterations for the two secondary scenes; the rigid scene uses the full
/// default schedule.
const CRISS_CROSS_ITERS: usize = 6000;
const ARTICULATED_ITERS: usize = 6000;
const COLLAPSE_PROBE_ITERS: usize = 3000;

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("GMC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |c: u32| only.as_ref().map_or(true, |s| s.contains(&c));
    let mut failures = 0;
    let mut report = |id: u32, name: &str, outcome: Check| {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e:#}")));
        if !ok {
            failures += 1;
        }
        println!("criterion {id:>2} {:<28} {}  {detail}", name, if ok { "PASS" } else { "FAIL" });
    };

    if wanted(1) {
        report(1, "gradient fidelity", gradient_fidelity());
    }
    if wanted(2) {
        report(2, "matching oracle", matching_oracle());
    }
    if wanted(6) {
        report(6, "endpoint exactness", endpoint_exactness());
    }
    if wanted(7) {
        report(7, "slerp linearity", slerp_linearity());
    }
    if wanted(8) {
        report(8, "metric oracles", metric_oracles());
    }
    if wanted(10) {
        report(10, "determinism", determinism());
    }
    if wanted(3) || wanted(9) || wanted(11) {
        match rigid_run() {
            Ok(run) => {
                if wanted(3) {
                    report(3, "rigid recovery", rigid_recovery(&run));
                }
                if wanted(9) {
                    report(9, "no collapse", no_collapse(&run));
                }
                if wanted(11) {
                    report(11, "interpolation vs baseline", interpolation_quality(&run));
                }
            }
            Err(e) => {
                for (id, name) in [(3, "rigid recovery"), (9, "no collapse"), (11, "interpolation vs baseline")] {
                    if wanted(id) {
                        report(id, name, Err(anyhow::anyhow!("training failed: {e:#}")));
                    }
                }
            }
        }
    }
    if wanted(4) {
        report(4, "criss-cross", criss_cross());
    }
    if wanted(5) {
        report(5, "articulated", articulated());
    }
    println!("acceptance: {failures} failing");
    if failures > 0 && std::env::var("GMC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

struct Run {
    scene: Scene,
    model: MotionModel,
    report: TrainReport,
    seconds: f64,
}

fn train_scene(scene: Scene, cfg: TrainConfig) -> anyhow::Result<Run> {
    let pair = prepare_pair(&scene.start, &scene.end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;
    let clock = Instant::now();
    let out = Trainer::new(g0.clone(), g1.clone(), cfg.clone())?.finish()?;
    let seconds = clock.elapsed().as_secs_f64();
    let model = MotionModel::build(
        &out.field0,
        &out.field1,
        &g0,
        &g1,
        &scene.start.positions,
        &cfg.energy,
        &pair.stats,
        &cfg.hash(),
    )?;
    Ok(Run {
        scene,
        model,
        report: out.report,
        seconds,
    })
}

fn short_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        alpha_ramp_iters: iterations / 2,
        ..Default::default()
    }
}

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> TrainCloud {
    let mut v = || Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let positions = (0..n).map(|_| v()).collect();
    let colors = (0..n).map(|_| v() * 0.5).collect();
    let features = (0..n).map(|_| {
        let a = v();
        let b = v();
        [a.x, a.y, b.z, a.z * b.x]
    });
    TrainCloud {
        positions,
        colors,
        features: features.collect(),
    }
}

fn perturbed_field(timestep: u8, rng: &mut ChaCha8Rng) -> anyhow::Result<UnaryField> {
    let mut f = UnaryField::new(timestep, &[8, 8, 8], Activation::Tanh, rng)?;
    for p in f.rotation.params_mut().iter_mut().chain(f.translation.params_mut().iter_mut()) {
        *p += rng.gen_range(-0.3..0.3);
    }
    Ok(f)
}

fn gradient_fidelity() -> Check {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g0 = random_cloud(20, &mut rng);
    let g1 = random_cloud(20, &mut rng);
    let mut fields = [perturbed_field(0, &mut rng)?, perturbed_field(1, &mut rng)?];
    let batch = |g: &TrainCloud| -> anyhow::Result<Batch> {
        let graph = NeighborGraph::build(&g.positions, 6)?;
        Ok(Batch {
            indices: (0..g.len()).collect(),
            edges: EdgeSet::new(&g.positions, graph.edges())?.into(),
            position_mask: None,
        })
    };
    let (b0, b1) = (batch(&g0)?, batch(&g1)?);
    let cfg = EnergyConfig::default();
    let alpha = 0.7;
    let first = loss_and_gradients(&fields[0], &fields[1], &g0, &g1, &b0, &b1, &cfg, alpha, 0.0, None, &mut rng)?;
    let (fwd, bwd) = (first.forward.index.clone(), first.backward.index.clone());
    let eval = |f: &[UnaryField; 2], rng: &mut ChaCha8Rng| {
        loss_and_gradients(&f[0], &f[1], &g0, &g1, &b0, &b1, &cfg, alpha, 0.0, Some((&fwd, &bwd)), rng)
    };
    let base = eval(&fields, &mut rng)?;
    let analytic = [
        base.grads0.rotation.clone(),
        base.grads0.translation.clone(),
        base.grads1.rotation.clone(),
        base.grads1.translation.clone(),
    ];
    // near the cube root of machine epsilon, where central-difference
    // truncation and round-off balance
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (slot, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let nudge = |fields: &mut [UnaryField; 2], d: f64| {
                let f = &mut fields[slot / 2];
                let p = if slot % 2 == 0 { f.rotation.params_mut() } else { f.translation.params_mut() };
                p[k] += d;
            };
            nudge(&mut fields, h);
            let up = eval(&fields, &mut rng)?.terms.total;
            nudge(&mut fields, -2.0 * h);
            let down = eval(&fields, &mut rng)?.terms.total;
            nudge(&mut fields, h);
            let fd = (up - down) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            count += 1;
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-3 && secs < 10.0,
        format!("max rel err {worst:.2e} over {count} params (<= 1e-3), {secs:.2}s (< 10s)"),
    ))
}

fn matching_oracle() -> Check {
    let cfg = EnergyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    let n = 500;
    for _ in 0..20 {
        let a = random_cloud(n, &mut rng);
        let mut b = random_cloud(n, &mut rng);
        // exact duplicates exercise the lowest-index tie rule
        for k in 0..10 {
            let (src, dst) = (k * 37 + 5, k * 17 + 300);
            b.positions[dst] = b.positions[src];
            b.colors[dst] = b.colors[src];
            b.features[dst] = b.features[src];
        }
        let mu_a: Vec<Vec3> = a.positions.iter().map(|p| p * 0.5).collect();
        let side_a = MatchSide::new(&a.colors, &a.features, &mu_a)?;
        let side_b = MatchSide::new(&b.colors, &b.features, &b.positions)?;
        let oracle: Vec<usize> = (0..n)
            .map(|i| {
                let mut best = (f64::INFINITY, usize::MAX);
                for j in 0..n {
                    let dc = a.colors[i] - b.colors[j];
                    let dm = mu_a[i] - b.positions[j];
                    let df: f64 = (0..4).map(|k| (a.features[i][k] - b.features[j][k]).powi(2)).sum();
                    let e = cfg.w_c * dc.dot(&dc) + cfg.w_f * df + cfg.w_mu * dm.dot(&dm);
                    if e < best.0 {
                        best = (e, j);
                    }
                }
                best.1
            })
            .collect();
        let dense = match_sides(&side_a, &side_b, &cfg, 0.0, &mut rng)?;
        let tree: KdTree<EMBED_DIM> = KdTree::new(side_b.embeddings(&cfg));
        let kd = min_energy_match(&side_a.embeddings(&cfg), &tree, 0.0, &mut rng)?;
        mismatches += (0..n)
            .filter(|&i| dense.index[i] != oracle[i] || kd.index[i] != oracle[i])
            .count();
    }
    Ok((mismatches == 0, format!("{mismatches} disagreements over 20 x {n} queries (== 0)")))
}

fn endpoint_exactness() -> Check {
    let scene = synthgen::generate(&presets::smoke())?;
    let cfg = short_config(150);
    let pair = prepare_pair(&scene.start, &scene.end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;
    let out = Trainer::new(g0.clone(), g1.clone(), cfg.clone())?.finish()?;
    let (f0, f1) = (&out.field0, &out.field1);
    let model = MotionModel::build(f0, f1, &g0, &g1, &scene.start.positions, &cfg.energy, &pair.stats, "x")?;
    let at0 = model.pose_at(0.0);
    let exact0 = at0.iter().zip(&scene.start.positions).all(|(a, b)| {
        a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits() && a.z.to_bits() == b.z.to_bits()
    });
    let at1 = model.pose_at(1.0);
    let mut worst: f64 = 0.0;
    for (i, &j) in model.matches.iter().enumerate() {
        let t0 = f0.transform(&g0.features[i], &g0.positions[i])?;
        let t1 = f1.transform(&g1.features[j], &g1.positions[j])?;
        let canonical = t0.rotation.rotate(&g0.positions[i]) + t0.translation;
        let end = t1.rotation.conjugate().rotate(&(canonical - t1.translation));
        let world = pair.stats.denormalize_position(&end);
        worst = worst.max((world - at1[i]).norm());
    }
    Ok((
        exact0 && worst <= 1e-9,
        format!("t=0 bitwise {exact0}, t=1 max dev {worst:.2e} (<= 1e-9)"),
    ))
}

fn signed_angle(q: &Quaternion, axis: &Vec3) -> f64 {
    2.0 * q.vector().dot(axis).atan2(q.w)
}

fn wrap(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI
}

fn slerp_linearity() -> Check {
    let times = [0.0, 0.25, 0.5, 0.75, 1.0, 1.2, 2.0];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let theta = rng.gen_range(-3.0..3.0);
        let base = Quaternion::from_axis_angle(
            &Vec3::new(rng.gen_range(-1.0..1.0), 1.0, rng.gen_range(-1.0..1.0)),
            rng.gen_range(-3.0..3.0),
        )?;
        let step = Quaternion::from_axis_angle(&axis, theta)?;
        let q0 = base;
        let q1 = (base * step).normalize()?;
        for &t in &times {
            let qt = slerp(&q0, &q1, t);
            let rel = (q0.conjugate() * qt).normalize()?;
            let err = wrap(signed_angle(&rel, &axis) - t * theta).abs();
            // the rotation axis itself must not drift
            let off_axis = (rel.vector() - axis * rel.vector().dot(&axis)).norm();
            worst = worst.max(err).max(off_axis);
        }
    }
    Ok((worst <= 1e-9, format!("max angle deviation {worst:.2e} rad over 50 pairs (<= 1e-9)")))
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..n {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_mped(p: &[Vec3], q: &[Vec3], fractions: &[f64]) -> f64 {
    let kfor = |f: f64, n: usize| (((f * n as f64).round() as usize).max(1)).min(n - 1);
    let potentials = |pts: &[Vec3], k: usize| -> Vec<f64> {
        pts.iter()
            .enumerate()
            .map(|(i, x)| {
                let mut d: Vec<f64> = pts
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, y)| (x - y).norm_squared())
                    .collect();
                d.sort_by(f64::total_cmp);
                d[..k].iter().sum()
            })
            .collect()
    };
    let nearest = |x: &Vec3| {
        (0..p.len())
            .min_by(|&a, &b| (p[a] - x).norm_squared().total_cmp(&(p[b] - x).norm_squared()))
            .unwrap()
    };
    let nn: Vec<usize> = q.iter().map(nearest).collect();
    fractions
        .iter()
        .map(|&f| {
            let pp = potentials(p, kfor(f, p.len()));
            let pq = potentials(q, kfor(f, q.len()));
            nn.iter().zip(&pq).map(|(&j, v)| (pp[j] - v).abs()).sum::<f64>() / q.len() as f64
        })
        .sum()
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut notes = Vec::new();
    let mut ok = true;

    let mut emd_err: f64 = 0.0;
    let perms = permutations(8);
    for _ in 0..5 {
        let p = random_points(8, &mut rng);
        let q = random_points(8, &mut rng);
        let brute = perms
            .iter()
            .map(|s| s.iter().enumerate().map(|(i, &j)| (p[i] - q[j]).norm()).sum::<f64>() / 8.0)
            .fold(f64::INFINITY, f64::min);
        emd_err = emd_err.max((emd(&p, &q, 8, 0)? - brute).abs());
    }
    ok &= emd_err <= 1e-9;
    notes.push(format!("emd vs 8! brute {emd_err:.1e}"));

    let p = random_points(300, &mut rng);
    let d = Vec3::new(0.3, -0.7, 0.2);
    let shifted: Vec<Vec3> = p.iter().map(|x| x + d).collect();
    let shift_err = (emd(&p, &shifted, 300, 1)? - d.norm()).abs();
    ok &= shift_err <= 1e-9;
    notes.push(format!("emd(P, P+d) - |d| {shift_err:.1e}"));

    let mut mped_err: f64 = 0.0;
    for fractions in [&DEFAULT_MPED_FRACTIONS[..], &[0.02, 0.1][..]] {
        let p = random_points(600, &mut rng);
        let q = random_points(500, &mut rng);
        let got = mped(&p, &q, fractions)?.total;
        let want = brute_mped(&p, &q, fractions);
        mped_err = mped_err.max((got - want).abs() / want.abs().max(1e-12));
    }
    ok &= mped_err <= 1e-9;
    notes.push(format!("mped vs double loop rel {mped_err:.1e}"));

    let self_mped = mped(&p, &p, &DEFAULT_MPED_FRACTIONS)?.total;
    ok &= self_mped == 0.0;
    notes.push(format!("mped(P, P) {self_mped:.1e}"));
    Ok((ok, notes.join(", ")))
}

fn gmc(args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_gmc")).args(["--threads", "1"]).args(args).output()?;
    if !out.status.success() {
        anyhow::bail!("gmc {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn pipeline(dir: &Path) -> anyhow::Result<()> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(dir.join("train.json"), r#"{"iterations": 200, "alpha_ramp_iters": 100, "checkpoint_every": 50}"#)?;
    gmc(&["gen", "--preset", "smoke", "--out-start", &p("start.ply"), "--out-end", &p("end.ply"), "--out-truth", &p("truth.json")])?;
    gmc(&["train", "--start", &p("start.ply"), "--end", &p("end.ply"), "--config", &p("train.json"), "--out", &p("run")])?;
    gmc(&["interpolate", "--run", &p("run"), "--out", &p("frames")])?;
    gmc(&["extrapolate", "--run", &p("run"), "--t", "-0.5", "1.5", "--out", &p("extra")])?;
    gmc(&["eval", "--frames", &p("frames"), "--start", &p("start.ply"), "--end", &p("end.ply"), "--run", &p("run"), "--out", &p("metrics.json")])?;
    Ok(())
}

fn tree_digest(root: &Path) -> anyhow::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "timing.json") {
                let rel = path.strip_prefix(root)?.to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Check {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (da, db) = (tree_digest(a.path())?, tree_digest(b.path())?);
    let differing: Vec<&str> = da
        .iter()
        .zip(&db)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same = da.len() == db.len() && differing.is_empty();
    Ok((
        same,
        format!("{} artifacts compared, {} differ {:?}", da.len(), differing.len(), differing),
    ))
}

fn rigid_run() -> anyhow::Result<Run> {
    let scene = synthgen::generate(&presets::rigid(2000))?;
    train_scene(scene, TrainConfig::default())
}

fn rigid_recovery(run: &Run) -> Check {
    let s = &run.scene;
    let acc = synthgen::score_correspondence(&run.model.matches, &s.truth, &s.end.positions)?;
    let tr = synthgen::score_transforms(&run.model.world_transforms(), &s.truth, &s.start.positions, s.start.bbox_diagonal())?;
    let ok = acc >= 0.95 && tr.median_rotation_deg <= 5.0 && tr.median_translation_frac <= 0.02 && run.seconds <= 900.0;
    Ok((
        ok,
        format!(
            "accuracy {acc:.4} (>= 0.95), rotation {:.2} deg (<= 5), translation {:.2}% (<= 2%), {:.0}s (<= 900s)",
            tr.median_rotation_deg,
            100.0 * tr.median_translation_frac,
            run.seconds
        ),
    ))
}

fn no_collapse(run: &Run) -> Check {
    let min = run.report.spread.iter().map(|s| s.spread).fold(f64::INFINITY, f64::min);
    let ok = !run.report.spread.is_empty() && min >= 0.2;

    // without dropout and with a heavy position weight, for reference only
    let scene = synthgen::generate(&presets::rigid(2000))?;
    let mut cfg = short_config(COLLAPSE_PROBE_ITERS);
    cfg.dropout = 0.0;
    cfg.energy.w_mu *= 10.0;
    let pair = prepare_pair(&scene.start, &scene.end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;
    let out = Trainer::new(g0.clone(), g1.clone(), cfg)?.finish()?;
    let probe = canonical_spread(&out.field0, &out.field1, &g0, &g1)?;
    Ok((
        ok,
        format!(
            "min spread {min:.3} over {} checkpoints (>= 0.2); no-dropout 10x w_mu probe {probe:.3}",
            run.report.spread.len()
        ),
    ))
}

fn interpolation_quality(run: &Run) -> Check {
    let s = &run.scene;
    let times: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let nn = synthgen::euclidean_nn_matches(&s.start.positions, &s.end.positions)?;
    let baseline = StraightLineMotion::new(&s.start.positions, &s.end.positions, &nn)?;
    let cfg = MetricConfig::default();
    let model_frames: Vec<Vec<Vec3>> = times.iter().map(|&t| run.model.pose_at(t)).collect();
    let base_frames: Vec<Vec<Vec3>> = times.iter().map(|&t| baseline.pose_at(t)).collect();
    let ours = evaluate_sweep(&times, &model_frames, &s.start.positions, &s.end.positions, &cfg)?;
    let theirs = evaluate_sweep(&times, &base_frames, &s.start.positions, &s.end.positions, &cfg)?;
    let ratio = ours.si_emd / theirs.si_emd;
    Ok((
        ratio <= 0.25,
        format!(
            "SI-EMD {:.2} vs straight-line NN {:.2}, ratio {ratio:.3} (<= 0.25)",
            ours.si_emd, theirs.si_emd
        ),
    ))
}

fn criss_cross() -> Check {
    let scene = synthgen::generate(&presets::criss_cross(1000))?;
    let nn = synthgen::euclidean_nn_matches(&scene.start.positions, &scene.end.positions)?;
    let baseline = synthgen::part_accuracy(&nn, &scene.truth)?;
    let run = train_scene(scene, short_config(CRISS_CROSS_ITERS))?;
    let acc = synthgen::part_accuracy(&run.model.matches, &run.scene.truth)?;
    Ok((
        acc >= 0.9 && baseline <= 0.2,
        format!(
            "part accuracy {acc:.4} (>= 0.9), NN baseline {baseline:.4} (<= 0.2), {CRISS_CROSS_ITERS} iterations"
        ),
    ))
}

fn articulated() -> Check {
    let scene = synthgen::generate(&presets::articulated_box(1200, 800, presets::ARTICULATED_GAP))?;
    // both parts have uniform features, so the lid is matched by shape alone
    let cfg = short_config(ARTICULATED_ITERS).weak_positions();
    let weight = cfg.position_weight;
    let run = train_scene(scene, cfg)?;
    let s = &run.scene;
    let tr = synthgen::score_transforms(&run.model.world_transforms(), &s.truth, &s.start.positions, s.start.bbox_diagonal())?;
    let cross_iso = |scale: f64| -> anyhow::Result<f64> {
        let a: Vec<Vec3> = run.model.start_normalized.iter().map(|p| p * scale).collect();
        let b: Vec<Vec3> = run.model.end_normalized.iter().map(|p| p * scale).collect();
        let graph = NeighborGraph::build(&a, DEFAULT_K)?;
        let edges = EdgeSet::new(&a, graph.edges())?;
        Ok(edge_isometry_loss(&edges, &b)?.value)
    };
    let cross = cross_iso(1.0)?;
    let unweighted = cross_iso(1.0 / weight)?;
    let mut ok = cross <= 1e-3;
    let mut parts = Vec::new();
    for p in &tr.parts {
        ok &= p.median_rotation_deg <= 7.0 && p.median_translation_frac <= 0.03;
        parts.push(format!(
            "{} {:.2} deg {:.2}%",
            p.name,
            p.median_rotation_deg,
            100.0 * p.median_translation_frac
        ));
    }
    Ok((
        ok,
        format!(
            "{} (<= 7 deg, <= 3%), cross iso {cross:.2e} (<= 1e-3) at position weight {weight} ({unweighted:.2e} at weight 1), {ARTICULATED_ITERS} iterations",
            parts.join(", ")
        ),
    ))
}
