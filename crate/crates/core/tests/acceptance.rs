//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thermvis::dataio::{generate_synthetic_dataset, mix_seed, DogParams, Plane, PreparedSet};
use thermvis::discriminator::LAYER_WIDTHS;
use thermvis::graph::{sigmoid, Graph};
use thermvis::kernels::conv_out_len;
use thermvis::losses::{
    adversarial_loss_g, discriminator_loss, euclidean_loss, feature_loss, total_generator_loss, LossComponents,
};
use thermvis::quality::{psnr, ssim};
use thermvis::training::{read_trace, resume, train, train_ablations, TrainRun};
use thermvis::verify::{auc, eer, evaluate_verification_with, roc, ProbeSource, RocCurve, ScoreSet};
use thermvis::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn signed(t: Tensor) -> ImageTensor {
    ImageTensor::new(t, ValueRange::Signed).unwrap()
}

// ---------------------------------------------------------------------------
// Direct-summation oracles

fn oracle_euclidean(p: &Tensor, t: &Tensor) -> f64 {
    let (n, c, h, w) = p.dims4();
    let mut total = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut sq = 0.0;
                for ch in 0..c {
                    let i = ((b * c + ch) * h + y) * w + x;
                    sq += (p.data()[i] - t.data()[i]).powi(2);
                }
                total += sq.sqrt();
            }
        }
    }
    total / (n * h * w) as f64
}

/// Naive 3×3 / pad 1 convolution with bias on a `[C, H, W]` volume.
fn oracle_conv3(x: &[f64], c: usize, h: usize, w: usize, wt: &Tensor, b: &Tensor) -> Vec<f64> {
    let co = wt.shape()[0];
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b.data()[o];
                for i in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (yy, xs) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if yy < 0 || xs < 0 || yy >= h as isize || xs >= w as isize {
                                continue;
                            }
                            s += wt.data()[((o * c + i) * 3 + ky) * 3 + kx] * x[(i * h + yy as usize) * w + xs as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}

/// Stage-by-stage evaluation of a stand-in extractor on one `[C, H, W]` image.
fn oracle_features(ex: &FeatureExtractor, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (mut v, mut c, mut h, mut w) = (x.to_vec(), c, h, w);
    for i in 0..ex.depth() {
        if i > 0 {
            let (h2, w2) = (h / 2, w / 2);
            let mut p = vec![0.0; c * h2 * w2];
            for ch in 0..c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let at = |yy: usize, xs: usize| v[(ch * h + yy) * w + xs];
                        p[(ch * h2 + y) * w2 + xx] =
                            (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1))
                                / 4.0;
                    }
                }
            }
            v = p;
            h = h2;
            w = w2;
        }
        let wt = ex.params().get(&format!("s{i}.conv.w")).unwrap();
        let b = ex.params().get(&format!("s{i}.conv.b")).unwrap();
        v = oracle_conv3(&v, c, h, w, wt, b).into_iter().map(|z| z.max(0.0)).collect();
        c = wt.shape()[0];
    }
    v
}

/// Brute-force SSIM: every window position, direct weighted sums.
fn oracle_ssim(a: &Plane, b: &Plane) -> f64 {
    let r = 5i32;
    let mut g = [[0.0f64; 11]; 11];
    let mut gs = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as i32 - r, j as i32 - r);
            *v = (-((dy * dy + dx * dx) as f64) / (2.0 * 1.5 * 1.5)).exp();
            gs += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = a.dims();
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = g[i][j] / gs;
                    let (va, vb) = (a.at(y + i, x + j), b.at(y + i, x + j));
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// ROC by counting at every candidate threshold independently.
fn oracle_roc(items: &[(bool, f64)]) -> Vec<(f64, f64)> {
    let ng = items.iter().filter(|x| x.0).count() as f64;
    let ni = items.len() as f64 - ng;
    let mut th: Vec<f64> = items.iter().map(|x| x.1).collect();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in th {
        let tp = items.iter().filter(|x| x.0 && x.1 >= t).count() as f64;
        let fp = items.iter().filter(|x| !x.0 && x.1 >= t).count() as f64;
        pts.push((fp / ni, tp / ng));
    }
    pts
}

fn oracle_auc(items: &[(bool, f64)]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for g in items.iter().filter(|x| x.0) {
        for i in items.iter().filter(|x| !x.0) {
            den += 1.0;
            if g.1 > i.1 {
                num += 1.0;
            } else if g.1 == i.1 {
                num += 0.5;
            }
        }
    }
    num / den
}

/// EER by bisection on the arclength parameter of the piecewise-linear
/// sweep, where `FAR − FRR` is nondecreasing.
fn oracle_eer(pts: &[(f64, f64)]) -> f64 {
    let at = |u: f64| {
        let i = (u.floor() as usize).min(pts.len() - 2);
        let t = u - i as f64;
        let far = pts[i].0 + t * (pts[i + 1].0 - pts[i].0);
        let tar = pts[i].1 + t * (pts[i + 1].1 - pts[i].1);
        (far, far - (1.0 - tar))
    };
    let (mut lo, mut hi) = (0.0, (pts.len() - 1) as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).1 >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    at(hi).0
}

// ---------------------------------------------------------------------------
// Finite differences

struct GradStats {
    coords: usize,
    max_rel: f64,
}

/// Central differences at `coords` sampled coordinates of `params`; the
/// relative error uses `max(|a|, |n|, floor)` as denominator.
fn gradcheck(
    params: &Params,
    analytic: &Params,
    f: &dyn Fn(&Params) -> f64,
    coords: usize,
    seed: u64,
) -> Result<GradStats, String> {
    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-5;
    let names: Vec<(String, usize)> = params.iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let total: usize = names.iter().map(|x| x.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < coords.min(total) {
        picked.insert(rng.random_range(0..total));
    }
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    for flat in picked {
        let (mut k, mut off) = (0, flat);
        while off >= names[k].1 {
            off -= names[k].1;
            k += 1;
        }
        let name = &names[k].0;
        let mut p = params.clone();
        let base = p.get(name).unwrap().data()[off];
        p.get_mut(name).unwrap().data_mut()[off] = base + H;
        let fp = f(&p);
        p.get_mut(name).unwrap().data_mut()[off] = base - H;
        let fm = f(&p);
        let num = (fp - fm) / (2.0 * H);
        let ana = analytic.get(name).map_or(0.0, |t| t.data()[off]);
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{name}[{off}] analytic {ana:e} numeric {num:e}");
        }
    }
    if max_rel >= 1e-4 {
        return Err(format!("max rel err {max_rel:.2e} at {worst}"));
    }
    Ok(GradStats {
        coords: coords.min(total),
        max_rel,
    })
}

fn input_gradcheck(name: &str, x: &Tensor, f: &dyn Fn(&mut Graph, thermvis::graph::Var) -> thermvis::graph::Var) -> Result<GradStats, String> {
    let mut p = Params::new();
    p.insert(name, x.clone());
    let eval = |p: &Params| {
        let mut g = Graph::new();
        let v = g.constant(p.get(name).unwrap().clone());
        let out = f(&mut g, v);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let b = g.bind(&p, true);
    let out = f(&mut g, b.var(name));
    let grads = g.backward(out);
    let analytic = b.grads(&g, &grads);
    gradcheck(&p, &analytic, &eval, x.len(), 11).map_err(|e| format!("{name}: {e}"))
}

// ---------------------------------------------------------------------------
// Criteria

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    let mut check = |what: &str, got: f64, want: f64| -> Result<(), String> {
        let r = rel_err(got, want);
        worst = worst.max(r);
        ensure(r < 1e-10, || format!("{what}: {got} vs oracle {want}"))
    };
    for trial in 0..10 {
        for c in [1, 3] {
            let p = rand_tensor(&[1, c, 8, 8], -1.0, 1.0, &mut rng);
            let t = rand_tensor(&[1, c, 8, 8], -1.0, 1.0, &mut rng);
            let got = euclidean_loss(&signed(p.clone()), &signed(t.clone())).unwrap();
            check(&format!("euclidean c={c} #{trial}"), got, oracle_euclidean(&p, &t))?;
        }
        let map = rand_tensor(&[1, 1, 8, 8], 1e-3, 1.0, &mut rng);
        let want = map.data().iter().map(|p| -p.ln()).sum::<f64>() / 64.0;
        check("adversarial", adversarial_loss_g(&map).unwrap(), want)?;

        let z = rand_tensor(&[1, 1, 8, 8], -6.0, 6.0, &mut rng);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let l = g.softplus_mean(zv, -1.0);
        let want = z.data().iter().map(|v| -sigmoid(*v).ln()).sum::<f64>() / 64.0;
        check("adversarial from logits", g.value(l).item(), want)?;

        let real = rand_tensor(&[1, 1, 8, 8], 1e-3, 1.0, &mut rng);
        let fake = rand_tensor(&[1, 1, 8, 8], 0.0, 0.999, &mut rng);
        let want = real.data().iter().map(|p| -p.ln()).sum::<f64>() / 64.0
            + fake.data().iter().map(|p| -(1.0 - p).ln()).sum::<f64>() / 64.0;
        check("discriminator", discriminator_loss(&real, &fake).unwrap(), want)?;

        for kind in [ExtractorKind::Perceptual, ExtractorKind::Identity] {
            let ex = FeatureExtractor::stand_in(kind, 1, 7 + trial);
            let p = rand_tensor(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
            let t = rand_tensor(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
            let fa = oracle_features(&ex, p.data(), 1, 8, 8);
            let fb = oracle_features(&ex, t.data(), 1, 8, 8);
            let want = fa.iter().zip(&fb).map(|(a, b)| (a - b).abs()).sum::<f64>() / fa.len() as f64;
            check(kind.name(), feature_loss(&ex, &signed(p), &signed(t)).unwrap(), want)?;
        }
    }
    let weights = Ablation::All.weights();
    let base = LossComponents {
        l_e: 0.3,
        l_e_guidance: 0.7,
        l_a: 1.9,
        l_p: 0.4,
        l_i: 2.2,
    };
    let (t0, _) = total_generator_loss(base, &weights);
    let expected = [1.0, 1.0, 0.005, 0.8, 0.1];
    for (i, k) in expected.iter().enumerate() {
        let mut c = base;
        match i {
            0 => c.l_e += 1.0,
            1 => c.l_e_guidance += 1.0,
            2 => c.l_a += 1.0,
            3 => c.l_p += 1.0,
            _ => c.l_i += 1.0,
        }
        let (t1, _) = total_generator_loss(c, &weights);
        ensure(((t1 - t0) - k).abs() < 1e-12, || format!("coefficient {i}: probed {} want {k}", t1 - t0))?;
    }
    let ones = LossComponents {
        l_e: 1.0,
        l_e_guidance: 1.0,
        l_a: 1.0,
        l_p: 1.0,
        l_i: 1.0,
    };
    let (t, _) = total_generator_loss(ones, &weights);
    ensure((t - 2.905).abs() < 1e-12, || format!("unit components give {t}, want 2.905"))?;
    Ok(format!("max rel err {worst:.1e}; weights probed as (1, 1, 0.005, 0.8, 0.1)"))
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut lines = Vec::new();
    let mut note = |what: &str, s: GradStats| lines.push(format!("{what} {}@{:.1e}", s.coords, s.max_rel));

    // Loss terms with respect to the prediction.
    let pred = rand_tensor(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let target = rand_tensor(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
    for squared in [false, true] {
        let t = target.clone();
        let s = input_gradcheck("pred", &pred, &move |g, x| {
            let tv = g.constant(t.clone());
            g.pixel_norm_loss(x, tv, squared)
        })?;
        note(if squared { "L_E(sq)" } else { "L_E" }, s);
    }
    for kind in [ExtractorKind::Perceptual, ExtractorKind::Identity] {
        let ex = FeatureExtractor::stand_in(kind, 3, 21);
        let t = target.clone();
        let s = input_gradcheck("pred", &pred, &move |g, x| {
            let tv = g.constant(t.clone());
            let a = ex.extract_graph(g, x);
            let b = ex.extract_graph(g, tv);
            g.abs_diff_mean(a, b)
        })?;
        note(kind.name(), s);
    }

    // Adversarial term with respect to the candidate image, through D.
    let d = DiscriminatorModel::build(4, 3).unwrap();
    let cond = rand_tensor(&[1, 3, 32, 32], -1.0, 1.0, &mut rng);
    let cand = rand_tensor(&[1, 1, 32, 32], -1.0, 1.0, &mut rng);
    {
        let (d2, c2) = (d.clone(), cond.clone());
        let s = input_gradcheck("cand", &cand, &move |g, x| {
            let b = g.bind(&d2.params, false);
            let cv = g.constant(c2.clone());
            let v = d2.forward_graph(g, &b, cv, x, NormMode::Train);
            g.softplus_mean(v.logits, -1.0)
        })?;
        note("L_A", s);
    }

    // Discriminator parameters through the discriminator loss.
    {
        let real = rand_tensor(&[1, 1, 32, 32], -1.0, 1.0, &mut rng);
        let loss = |p: &Params, g: &mut Graph| {
            let m = DiscriminatorModel {
                params: p.clone(),
                ..d.clone()
            };
            let b = g.bind(p, true);
            let (c, r, f) = (g.constant(cond.clone()), g.constant(real.clone()), g.constant(cand.clone()));
            let vr = m.forward_graph(g, &b, c, r, NormMode::Train);
            let vf = m.forward_graph(g, &b, c, f, NormMode::Train);
            let lr = g.softplus_mean(vr.logits, -1.0);
            let lf = g.softplus_mean(vf.logits, 1.0);
            (g.weighted_sum(&[(lr, 1.0), (lf, 1.0)]), b)
        };
        let mut g = Graph::new();
        let (out, b) = loss(&d.params, &mut g);
        let grads = g.backward(out);
        let analytic = b.grads(&g, &grads);
        let eval = |p: &Params| {
            let mut g = Graph::new();
            let (o, _) = loss(p, &mut g);
            g.value(o).item()
        };
        note("D params", gradcheck(&d.params, &analytic, &eval, 150, 5)?);
    }

    // Generator parameters through the generator objective.
    let gen = GeneratorModel::build(GeneratorConfig::default(), 9).unwrap();
    let perc = FeatureExtractor::stand_in(ExtractorKind::Perceptual, 1, 31);
    let ident = FeatureExtractor::stand_in(ExtractorKind::Identity, 1, 32);
    for side in [8usize, 32] {
        let x = rand_tensor(&[1, 3, side, side], -1.0, 1.0, &mut rng);
        let y = rand_tensor(&[1, 1, side, side], -1.0, 1.0, &mut rng);
        let with_adv = side >= 32;
        let w = Ablation::All.weights().coefficients();
        let objective = |p: &Params, g: &mut Graph| {
            let m = GeneratorModel {
                params: p.clone(),
                ..gen.clone()
            };
            let b = g.bind(p, true);
            let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
            let gv = m.forward_graph(g, &b, xv, NormMode::Train, true);
            let le = g.pixel_norm_loss(gv.main, yv, false);
            let lg = g.pixel_norm_loss(gv.guidance.unwrap(), yv, false);
            let (pa, pb) = (perc.extract_graph(g, gv.main), perc.extract_graph(g, yv));
            let lp = g.abs_diff_mean(pa, pb);
            let (ia, ib) = (ident.extract_graph(g, gv.main), ident.extract_graph(g, yv));
            let li = g.abs_diff_mean(ia, ib);
            let mut terms = vec![(le, w[0]), (lg, w[1]), (lp, w[3]), (li, w[4])];
            if with_adv {
                let db = g.bind(&d.params, false);
                let dv = d.forward_graph(g, &db, xv, gv.main, NormMode::Train);
                terms.push((g.softplus_mean(dv.logits, -1.0), w[2]));
            }
            (g.weighted_sum(&terms), b)
        };
        let mut g = Graph::new();
        let (out, b) = objective(&gen.params, &mut g);
        let grads = g.backward(out);
        let analytic = b.grads(&g, &grads);
        let eval = |p: &Params| {
            let mut g = Graph::new();
            let (o, _) = objective(p, &mut g);
            g.value(o).item()
        };
        let label = if with_adv { "G params (all terms, 32×32)" } else { "G params (8×8)" };
        note(label, gradcheck(&gen.params, &analytic, &eval, 150, 6 + side as u64)?);
    }
    Ok(format!("h 1e-6, floor 1e-5: {}", lines.join(", ")))
}

fn architecture() -> Outcome {
    let d = DiscriminatorModel::build(4, 0).map_err(|e| e.to_string())?;
    ensure(d.conv_widths() == vec![32, 64, 128, 256, 256, 1], || format!("widths {:?}", d.conv_widths()))?;
    ensure(LAYER_WIDTHS == [32, 64, 128, 256, 256, 1], || "layer table".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let cond = rand_tensor(&[1, 3, 256, 256], 0.0, 1.0, &mut rng);
    let cand = rand_tensor(&[1, 1, 256, 256], 0.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let b = g.bind(&d.params, false);
    let (c, k) = (g.constant(cond), g.constant(cand));
    let v = d.forward_graph(&mut g, &b, c, k, NormMode::Eval);
    let (logits, probs) = (g.value(v.logits).clone(), g.value(v.probs).clone());
    ensure(probs.shape() == [1, 1, 16, 16], || format!("patch map {:?}", probs.shape()))?;
    ensure(
        logits.data().iter().zip(probs.data()).all(|(z, p)| *p == sigmoid(*z)),
        || "terminal activation is not the logistic sigmoid".into(),
    )?;
    // Patch-map size from layer arithmetic alone.
    let mut side = 256;
    for (k, s, p) in [(3, 1, 1), (4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 2, 1), (3, 1, 1)] {
        side = (side + 2 * p - k) / s + 1;
    }
    ensure(side == 16, || format!("oracle patch side {side}"))?;

    let cfg = GeneratorConfig::default();
    let gen = GeneratorModel::build(cfg.clone(), 0).map_err(|e| e.to_string())?;
    for j in 0..cfg.n_res_blocks {
        for conv in ["conv1", "conv2"] {
            let w = gen.params.get(&format!("res{j}.{conv}.w")).ok_or("missing residual conv")?;
            ensure(w.shape() == [64, 64, 3, 3], || format!("res{j}.{conv} shape {:?}", w.shape()))?;
        }
    }
    let x = ImageTensor::new(rand_tensor(&[1, 3, 256, 256], 0.0, 1.0, &mut rng), ValueRange::Unit).unwrap();
    let feat = gen.encode(&x, NormMode::Eval).map_err(|e| e.to_string())?;
    let mut s = conv_out_len(256, 7, 1, 3).unwrap();
    for _ in 0..cfg.n_down {
        s = conv_out_len(s, 3, 2, 1).unwrap();
    }
    ensure(feat.shape() == [1, 64, s, s] && s == 64, || format!("bottleneck {:?}, oracle side {s}", feat.shape()))?;
    let wide = GeneratorModel::build(
        GeneratorConfig {
            base_width: 64,
            ..cfg.clone()
        },
        0,
    )
    .map_err(|e| e.to_string())?;
    let wide_feat = wide.encode(&x, NormMode::Eval).map_err(|e| e.to_string())?;
    ensure(wide_feat.shape() == [1, 64 << cfg.n_down, s, s], || format!("base 64 bottleneck {:?}", wide_feat.shape()))?;
    let out = gen.forward(&x, NormMode::Eval).map_err(|e| e.to_string())?;
    ensure(out.main.dims() == (1, 1, 256, 256), || format!("output {:?}", out.main.dims()))?;
    Ok("D widths (32,64,128,256,256,1)+sigmoid, 256→16×16 patches, residual 3×3×64, bottleneck 64×64×64 (256 maps at base width 64)".into())
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut worst_ssim: f64 = 0.0;
    for i in 0..100 {
        let a = Plane::new(32, 32, (0..1024).map(|_| rng.random::<f64>()).collect());
        let b = if i % 2 == 0 {
            a.map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0))
        } else {
            Plane::new(32, 32, (0..1024).map(|_| rng.random::<f64>()).collect())
        };
        let d = (ssim(&a, &b).unwrap() - oracle_ssim(&a, &b)).abs();
        worst_ssim = worst_ssim.max(d);
        ensure(d < 1e-8, || format!("ssim pair {i} differs by {d:e}"))?;
    }
    let z = Plane::filled(8, 8, 0.0);
    let p = psnr(&z, &Plane::filled(8, 8, 0.1)).unwrap();
    ensure(p == 20.0, || format!("MSE 0.01 gives {p:?} dB"))?;
    ensure(psnr(&z, &Plane::filled(8, 8, 1.0)).unwrap() == 0.0, || "MSE 1 is not 0 dB".into())?;
    ensure(psnr(&z, &z).unwrap() == f64::INFINITY, || "identical images not +inf".into())?;

    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = rng.random_range(4..50);
        let levels = rng.random_range(3..30);
        let mut items: Vec<(bool, f64)> = (0..n)
            .map(|_| (rng.random_bool(0.4), rng.random_range(0..levels) as f64 / levels as f64 * 2.0 - 1.0))
            .collect();
        items[0].0 = true;
        items[1].0 = false;
        let set = ScoreSet::from_labelled(&items);
        let curve = roc(&set).unwrap();
        let oracle = oracle_roc(&items);
        ensure(curve.points.len() == oracle.len(), || format!("set {i}: roc length"))?;
        for (p, q) in curve.points.iter().zip(&oracle) {
            let d = (p.0 - q.0).abs().max((p.1 - q.1).abs());
            worst = worst.max(d);
            ensure(d < 1e-9, || format!("set {i}: roc point {p:?} vs {q:?}"))?;
        }
        let (a, ao) = (auc(&curve), oracle_auc(&items));
        worst = worst.max((a - ao).abs());
        ensure((a - ao).abs() < 1e-9, || format!("set {i}: auc {a} vs {ao}"))?;
        let (e, eo) = (eer(&curve), oracle_eer(&oracle));
        worst = worst.max((e - eo).abs());
        ensure((e - eo).abs() < 1e-9, || format!("set {i}: eer {e} vs {eo}"))?;
        let warped: Vec<(bool, f64)> = items.iter().map(|&(g, s)| (g, (3.0 * s).exp() - 7.0)).collect();
        let curve_w = roc(&ScoreSet::from_labelled(&warped)).unwrap();
        ensure(curve_w == curve, || format!("set {i}: ROC changed under monotone transform"))?;
        ensure(auc(&curve_w) == a && eer(&curve_w) == e, || format!("set {i}: AUC/EER not rank invariant"))?;
    }
    Ok(format!(
        "ssim max diff {worst_ssim:.1e} (100 pairs), psnr analytic cases exact, roc/auc/eer max diff {worst:.1e} (100 sets)"
    ))
}

fn small_train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        checkpoint_every: 25,
        seed: 17,
        ..TrainConfig::default()
    }
}

fn trace_diff(a: &[(u64, LossReport)], b: &[(u64, LossReport)]) -> Result<f64, String> {
    ensure(a.len() == b.len(), || format!("trace lengths {} vs {}", a.len(), b.len()))?;
    let mut worst: f64 = 0.0;
    for ((sa, ra), (sb, rb)) in a.iter().zip(b) {
        ensure(sa == sb, || format!("step {sa} vs {sb}"))?;
        for (x, y) in ra.values().iter().zip(rb.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

fn determinism() -> Outcome {
    let data = generate_synthetic_dataset(5, 8, 1, 32).map_err(|e| e.to_string())?;
    let cfg = small_train_config(50);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |dir: &str| -> Result<TrainRun, String> {
        train(&cfg, &data, &tmp.path().join(dir)).map_err(|e| e.to_string())
    };
    let a = run("a")?;
    let b = run("b")?;
    let d_ab = trace_diff(&a.trace, &b.trace)?;
    ensure(d_ab <= 1e-6, || format!("dual runs differ by {d_ab:e}"))?;
    ensure(
        a.state.generator.params.digest() == b.state.generator.params.digest(),
        || "final generator weights differ".into(),
    )?;
    // Interrupted run: copy the step-25 checkpoint and trace prefix, resume.
    let c_dir = tmp.path().join("c");
    std::fs::create_dir_all(c_dir.join("checkpoints")).map_err(|e| e.to_string())?;
    let ck = a.checkpoints.iter().find(|p| p.ends_with("step_000025.ckpt")).ok_or("no step-25 checkpoint")?;
    let prefix: Vec<String> = std::fs::read_to_string(&a.trace_path)
        .map_err(|e| e.to_string())?
        .lines()
        .take(26)
        .map(String::from)
        .collect();
    std::fs::write(c_dir.join("trace.csv"), prefix.join("\n") + "\n").map_err(|e| e.to_string())?;
    let c = resume(ck, &data, &c_dir).map_err(|e| e.to_string())?;
    let from_disk = read_trace(&c.trace_path).map_err(|e| e.to_string())?;
    let d_ac = trace_diff(&a.trace, &from_disk)?;
    ensure(d_ac <= 1e-6, || format!("resumed trace differs by {d_ac:e}"))?;
    let bytes = |p: &std::path::Path| std::fs::read(p).map_err(|e| e.to_string());
    let ck_a = bytes(a.checkpoints.last().unwrap())?;
    ensure(ck_a == bytes(c.checkpoints.last().unwrap())?, || "final checkpoints differ".into())?;
    let reload = thermvis::checkpoint::Checkpoint::load(a.checkpoints.last().unwrap()).map_err(|e| e.to_string())?;
    ensure(reload.encode().map_err(|e| e.to_string())? == ck_a, || "save→load→save not bitwise".into())?;
    Ok(format!("dual-run max diff {d_ab:e}, resume@25 max diff {d_ac:e}, checkpoints bitwise equal"))
}

fn learning_smoke() -> Outcome {
    let split = generate_synthetic_dataset(23, 16, 1, 64).map_err(|e| e.to_string())?;
    ensure(split.train.len() == 8, || format!("{} training pairs", split.train.len()))?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = TrainConfig {
        steps: 500,
        checkpoint_every: 0,
        seed: 3,
        ..TrainConfig::default()
    };
    let per_epoch = PreparedSet::new(&split.train, base.protocol, &DogParams::default())
        .map_err(|e| e.to_string())?
        .batches_per_epoch(base.batch_size);
    let e_cfg = TrainConfig {
        ablation: Some(Ablation::E),
        ..base.clone()
    };
    let e_run = train(&e_cfg, &split, &tmp.path().join("e")).map_err(|e| e.to_string())?;
    let mean = |rows: &[(u64, LossReport)]| rows.iter().map(|r| r.1.l_e).sum::<f64>() / rows.len() as f64;
    let first = mean(&e_run.trace[..per_epoch]);
    let last = mean(&e_run.trace[e_run.trace.len() - per_epoch..]);
    let ratio = last / first;
    ensure(ratio <= 0.5, || format!("E: L_E first epoch {first:.4} → last epoch {last:.4} (ratio {ratio:.3})"))?;

    let all_cfg = TrainConfig {
        ablation: Some(Ablation::All),
        ..base
    };
    let all_run = train(&all_cfg, &split, &tmp.path().join("all")).map_err(|e| format!("ALL: {e}"))?;
    ensure(all_run.trace.len() == 500, || "ALL run incomplete".into())?;
    ensure(
        all_run.trace.iter().all(|(_, r)| r.values().iter().all(|v| v.is_finite())),
        || "ALL trace has non-finite entries".into(),
    )?;
    ensure(all_run.state.generator.params.all_finite(), || "ALL weights non-finite".into())?;
    let last_all = all_run.trace.last().unwrap().1.clone();
    Ok(format!(
        "E: L_E {first:.4} → {last:.4} ({:.0}% reduction); ALL finite for 500 steps (final total {:.4}, d_loss {:.4})",
        100.0 * (1.0 - ratio),
        last_all.total,
        last_all.d_loss
    ))
}

fn ablation_structure() -> Outcome {
    let split = generate_synthetic_dataset(31, 8, 1, 32).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = TrainConfig {
        steps: 6,
        checkpoint_every: 0,
        seed: 8,
        ..TrainConfig::default()
    };
    let runs = train_ablations(&base, &split, tmp.path()).map_err(|e| e.to_string())?;
    ensure(runs.len() == 5, || format!("{} runs", runs.len()))?;
    let extractor = FeatureExtractor::stand_in(ExtractorKind::Perceptual, 1, mix_seed(base.feature_seed, 1));
    let mut curves: Vec<RocCurve> = Vec::new();
    for (ablation, run) in &runs {
        let w = ablation.weights();
        let rows = read_trace(&run.trace_path).map_err(|e| e.to_string())?;
        ensure(rows.len() == 6, || format!("{ablation}: {} trace rows", rows.len()))?;
        for (step, r) in &rows {
            let cols = [
                (w.enable_guidance, r.l_e_guidance, "l_e_guidance"),
                (w.enable_adversarial, r.l_a, "l_a"),
                (w.enable_adversarial, r.d_loss, "d_loss"),
                (w.enable_perceptual, r.l_p, "l_p"),
                (w.enable_identity, r.l_i, "l_i"),
            ];
            for (on, v, name) in cols {
                ensure(on == (v != 0.0), || format!("{ablation} step {step}: {name} = {v}"))?;
            }
        }
        let rep = evaluate_verification_with(
            ProbeSource::Generator(&run.state.generator),
            &split.test,
            base.protocol,
            &extractor,
            &base.dog,
        )
        .map_err(|e| e.to_string())?;
        let ok = rep.roc.points.first() == Some(&(0.0, 0.0)) && rep.roc.points.last() == Some(&(1.0, 1.0));
        ensure(ok, || format!("{ablation}: ROC endpoints"))?;
        curves.push(rep.roc);
    }
    Ok(format!(
        "5 configurations trained and evaluated, {} ROC curves, disabled columns identically zero",
        curves.len()
    ))
}

fn verification_sanity() -> Outcome {
    let split = generate_synthetic_dataset(41, 12, 1, 64).map_err(|e| e.to_string())?;
    let subjects = DatasetSplit::subjects(&split.test).len();
    ensure(subjects >= 4, || format!("only {subjects} test subjects"))?;
    let extractor = FeatureExtractor::stand_in(ExtractorKind::Perceptual, 1, 5);
    let mut out = Vec::new();
    for protocol in Protocol::ALL {
        let rep = evaluate_verification_with(ProbeSource::Oracle, &split.test, protocol, &extractor, &DogParams::default())
            .map_err(|e| e.to_string())?;
        ensure(rep.auc == 1.0 && rep.eer == 0.0, || {
            format!("{protocol}: AUC {} EER {}", rep.auc, rep.eer)
        })?;
        out.push(protocol.name());
    }
    Ok(format!("oracle probe AUC 1.0 / EER 0.0 with {subjects} subjects on {}", out.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("loss-oracles", loss_oracles),
        ("gradient-suite", gradient_suite),
        ("architecture-conformance", architecture),
        ("metric-oracles", metric_oracles),
        ("training-determinism", determinism),
        ("learning-smoke", learning_smoke),
        ("ablation-structure", ablation_structure),
        ("verification-sanity", verification_sanity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let res = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS {name} [{secs:.1}s] {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s] {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
