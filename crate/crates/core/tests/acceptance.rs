//! The ten acceptance criteria. Prints one PASS/FAIL line per criterion and
//! exits non-zero on any unexpected outcome.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use crackseg::augment::{apply, AugmentOp, AugmentPolicy, Sample};
use crackseg::backbones::{
    backbone_forward, hrnet_branches, panet_bottom_up, resnet_fpn_forward, BackboneConfig, BackboneKind,
};
use crackseg::dataset::{rasterize_polygon, SceneLevel};
use crackseg::geometry::{BBox, BinaryMask};
use crackseg::heads::{paste_mask, roi_align, PredictConfig};
use crackseg::metrics::{coco_ap, iou_thresholds, prf_accuracy, ApReport, ApVariant, ConfusionCounts, EvalImage, GroundTruth, ScoredInstance};
use crackseg::model::{MaskRcnn, ModelConfig, PlanSource, TrainTarget};
use crackseg::nn::{Ctx, Graph, ParamStore, Tensor, WeightInit};
use crackseg::pipeline::{evaluate, load_sample, train, LAST_CHECKPOINT};
use ndarray::Array3;
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

/// Criteria whose published targets are mutually inconsistent; they are
/// reported red and an unexpected pass is treated as an error.
const KNOWN_RED: &[u32] = &[2];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs() < limit_s, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 1

const BAND_BOUNDS: [(f64, f64); 4] = [(0.0, 1e10), (0.0, 1024.0), (1024.0, 9216.0), (9216.0, 1e10)];
const CANVAS: usize = 160;

fn oracle_iou(variant: ApVariant, d: &ScoredInstance, g: &GroundTruth) -> f64 {
    match variant {
        ApVariant::Box => {
            let iw = (d.bbox.x2.min(g.bbox.x2) - d.bbox.x1.max(g.bbox.x1)).max(0.0);
            let ih = (d.bbox.y2.min(g.bbox.y2) - d.bbox.y1.max(g.bbox.y1)).max(0.0);
            let inter = iw * ih;
            let ad = (d.bbox.x2 - d.bbox.x1) * (d.bbox.y2 - d.bbox.y1);
            let ag = (g.bbox.x2 - g.bbox.x1) * (g.bbox.y2 - g.bbox.y1);
            inter / (ad + ag - inter)
        }
        ApVariant::Mask => {
            let mut inter = 0u64;
            let mut union = 0u64;
            for r in 0..CANVAS {
                for c in 0..CANVAS {
                    let (a, b) = (d.mask.get(r, c), g.mask.get(r, c));
                    inter += u64::from(a && b);
                    union += u64::from(a || b);
                }
            }
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        }
    }
}

fn oracle_area(variant: ApVariant, b: &BBox, m: &BinaryMask) -> f64 {
    match variant {
        ApVariant::Box => (b.x2 - b.x1) * (b.y2 - b.y1),
        ApVariant::Mask => m.0.iter().filter(|&&v| v).count() as f64,
    }
}

/// Interpolated precision at the 101 recall points for one IoU threshold
/// and one size band, or `None` without ground truth in the band.
fn oracle_curve(images: &[&EvalImage], variant: ApVariant, band: (f64, f64), t: f64) -> Option<Vec<f64>> {
    let outside = |a: f64| a < band.0 || a > band.1;
    // (score, image rank, detection rank, matched, ignored)
    let mut entries: Vec<(f64, usize, usize, bool, bool)> = Vec::new();
    let mut npos = 0usize;
    for (ir, im) in images.iter().enumerate() {
        let gt_ignored: Vec<bool> = im.ground_truth.iter().map(|g| outside(oracle_area(variant, &g.bbox, &g.mask))).collect();
        npos += gt_ignored.iter().filter(|&&i| !i).count();
        let mut order: Vec<usize> = (0..im.detections.len()).collect();
        order.sort_by(|&a, &b| {
            im.detections[b].score.partial_cmp(&im.detections[a].score).unwrap().then(a.cmp(&b))
        });
        order.truncate(100);
        let mut taken = vec![false; im.ground_truth.len()];
        for (rank, &d) in order.iter().enumerate() {
            let det = &im.detections[d];
            let ious: Vec<f64> = im.ground_truth.iter().map(|g| oracle_iou(variant, det, g)).collect();
            // Best eligible candidate among gts with the given ignore flag:
            // highest IoU, ties to the later gt.
            let best_with = |flag: bool| {
                (0..ious.len())
                    .filter(|&g| !taken[g] && gt_ignored[g] == flag && ious[g] >= t)
                    .fold(None, |best: Option<usize>, g| match best {
                        Some(b) if ious[g] < ious[b] => Some(b),
                        _ => Some(g),
                    })
            };
            match best_with(false).or_else(|| best_with(true)) {
                Some(g) => {
                    taken[g] = true;
                    entries.push((det.score, ir, rank, true, gt_ignored[g]));
                }
                None => entries.push((det.score, ir, rank, false, outside(oracle_area(variant, &det.bbox, &det.mask)))),
            }
        }
    }
    if npos == 0 {
        return None;
    }
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for e in entries.iter().filter(|e| !e.4) {
        if e.3 {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
    }
    Some(
        (0..101)
            .map(|k| {
                let r = k as f64 / 100.0;
                points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .collect(),
    )
}

fn oracle_ap(images: &[EvalImage], variant: ApVariant) -> Option<[Option<f64>; 6]> {
    let mut sorted: Vec<&EvalImage> = images.iter().collect();
    sorted.sort_by_key(|im| im.image_id);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let band = |b: (f64, f64)| -> Option<Vec<f64>> {
        iou_thresholds().iter().map(|&t| oracle_curve(&sorted, variant, b, t).map(|q| mean(&q))).collect()
    };
    let all = band(BAND_BOUNDS[0])?;
    let by = |i: usize| band(BAND_BOUNDS[i]).map(|v| 100.0 * mean(&v));
    Some([Some(100.0 * mean(&all)), Some(100.0 * all[0]), Some(100.0 * all[5]), by(1), by(2), by(3)])
}

fn report_values(r: &ApReport) -> [Option<f64>; 6] {
    [Some(r.ap), Some(r.ap50), Some(r.ap75), r.ap_s, r.ap_m, r.ap_l]
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0..100) as f64;
    let y = rng.random_range(0..100) as f64;
    let w = rng.random_range(1..=60) as f64;
    let h = rng.random_range(1..=60) as f64;
    BBox::new(x, y, x + w, y + h)
}

fn jitter_box(b: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let mut d = || rng.random_range(-3i32..=3) as f64;
    let x1 = (b.x1 + d()).max(0.0);
    let y1 = (b.y1 + d()).max(0.0);
    let x2 = (b.x2 + d()).min(CANVAS as f64).max(x1 + 1.0);
    let y2 = (b.y2 + d()).min(CANVAS as f64).max(y1 + 1.0);
    BBox::new(x1, y1, x2, y2)
}

fn holey_mask(b: &BBox, rng: &mut ChaCha8Rng) -> BinaryMask {
    let keep = rng.random_range(0.6..1.0);
    BinaryMask::from_fn(CANVAS, CANVAS, |(r, c)| {
        let inside = (r as f64) >= b.y1 && (r as f64) < b.y2 && (c as f64) >= b.x1 && (c as f64) < b.x2;
        inside && rng.random::<f64>() < keep
    })
}

fn random_eval_set(rng: &mut ChaCha8Rng) -> Vec<EvalImage> {
    let n_images = rng.random_range(1..=5);
    let mut ids: Vec<u64> = (1..=20).collect();
    ids.shuffle(rng);
    (0..n_images)
        .map(|i| {
            let gts: Vec<BBox> = (0..rng.random_range(0..=5)).map(|_| random_box(rng)).collect();
            let ground_truth = gts
                .iter()
                .map(|b| GroundTruth {
                    bbox: *b,
                    mask: holey_mask(b, rng),
                })
                .collect();
            let detections = (0..rng.random_range(0..=5))
                .map(|_| {
                    let b = match gts.choose(rng) {
                        Some(g) if rng.random_bool(0.7) => jitter_box(g, rng),
                        _ => random_box(rng),
                    };
                    ScoredInstance {
                        bbox: b,
                        mask: holey_mask(&b, rng),
                        score: rng.random_range(1..=9) as f64 / 10.0,
                    }
                })
                .collect();
            EvalImage {
                image_id: ids[i],
                ground_truth,
                detections,
            }
        })
        .collect()
}

fn criterion_1() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut compared = 0;
    for trial in 0..200 {
        let images = random_eval_set(&mut rng);
        for variant in [ApVariant::Box, ApVariant::Mask] {
            let got = coco_ap(&images, variant).ok().map(|r| report_values(&r));
            let want = oracle_ap(&images, variant);
            ensure(got == want, || format!("trial {trial} {}: got {got:?}, oracle {want:?}", variant.as_str()))?;
            compared += 1;
        }
    }
    within(t0.elapsed(), 60)?;
    Ok(format!("{compared} evaluations identical to the exhaustive oracle in {:.1}s", t0.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Check {
    let c = ConfusionCounts {
        tp: 765,
        fn_: 365,
        fp: 163,
        tn: 1339,
    };
    ensure(c.tp + c.fn_ == 1130 && c.fp + c.tn == 1502 && c.total() == 2632, || "counts do not cover 1130 + 1502 images".into())?;
    let p = prf_accuracy(&c).map_err(|e| e.to_string())?;
    let pct = |v: f64| (1000.0 * v).round() / 10.0;
    let (recall, precision, accuracy) = (pct(p.recall.unwrap()), pct(p.precision.unwrap()), 100.0 * p.accuracy);
    let detail = format!("recall {recall}% (67.7), precision {precision}% (82.4), accuracy {accuracy:.1}% (75.1 ± 0.5)");
    ensure(recall == 67.7, || detail.clone())?;
    ensure(precision == 82.4, || detail.clone())?;
    ensure((accuracy - 75.1).abs() <= 0.5, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

/// Bilinear value at feature coordinates: zero beyond one cell outside the
/// map, edge-clamped otherwise.
fn oracle_bilinear(f: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let s = f.shape();
    let (h, w) = (s[1], s[2]);
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, cc: usize| f.data()[(c * h + r) * w + cc];
    at(y0, x0) * (1.0 - fy) * (1.0 - fx) + at(y0, x1) * (1.0 - fy) * fx + at(y1, x0) * fy * (1.0 - fx) + at(y1, x1) * fy * fx
}

/// Bin averages by dense midpoint sampling, `n × n` points per bin.
fn oracle_roi_align(f: &Tensor, roi: &BBox, scale: f64, out: usize, n: usize) -> Vec<f64> {
    let ch = f.shape()[0];
    let (x0, y0) = (roi.x1 * scale - 0.5, roi.y1 * scale - 0.5);
    let bw = (roi.x2 - roi.x1) * scale / out as f64;
    let bh = (roi.y2 - roi.y1) * scale / out as f64;
    let mut v = Vec::with_capacity(ch * out * out);
    for c in 0..ch {
        for i in 0..out {
            for j in 0..out {
                let mut acc = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        let y = y0 + bh * (i as f64 + (a as f64 + 0.5) / n as f64);
                        let x = x0 + bw * (j as f64 + (b as f64 + 0.5) / n as f64);
                        acc += oracle_bilinear(f, c, y, x);
                    }
                }
                v.push(acc / (n * n) as f64);
            }
        }
    }
    v
}

fn random_inner_roi(rng: &mut ChaCha8Rng, h: usize, w: usize, stride: usize) -> BBox {
    let (hp, wp) = ((h * stride) as f64, (w * stride) as f64);
    let x1 = rng.random_range(0.0..wp - 1.0);
    let y1 = rng.random_range(0.0..hp - 1.0);
    BBox::new(x1, y1, rng.random_range(x1 + 1.0..=wp), rng.random_range(y1 + 1.0..=hp))
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for pair in 0..100 {
        let (h, w) = (rng.random_range(4..16), rng.random_range(4..16));
        let stride = [1usize, 2, 4, 8][rng.random_range(0..4)];
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.sample(StandardNormal)).collect();
        let f = Tensor::from_vec(&[3, h, w], data);
        let roi = random_inner_roi(&mut rng, h, w, stride);
        let out = rng.random_range(1..=7);
        let got = roi_align(&f, &roi, 1.0 / stride as f64, out, 100).map_err(|e| e.to_string())?;
        let want = oracle_roi_align(&f, &roi, 1.0 / stride as f64, out, 128);
        let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(diff < 1e-3, || format!("pair {pair}: max deviation {diff:.2e} for {roi:?}"))?;
        worst = worst.max(diff);
    }
    for _ in 0..100 {
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let stride = [1usize, 4, 16][rng.random_range(0..3)];
        let value: f64 = rng.sample(StandardNormal);
        let f = Tensor::full(&[2, h, w], value);
        let roi = random_inner_roi(&mut rng, h, w, stride);
        let out = roi_align(&f, &roi, 1.0 / stride as f64, rng.random_range(1..=7), rng.random_range(1..=4)).map_err(|e| e.to_string())?;
        ensure(out.data().iter().all(|&v| v == value), || format!("constant {value} not preserved for {roi:?}"))?;
    }
    Ok(format!("max oracle deviation {worst:.2e}; constant fields preserved exactly"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = common::synthetic(dir.path(), 1, 0, 4);
    let sample = load_sample(&data, &data.records()[0]).map_err(|e| e.to_string())?;
    let target = TrainTarget::from_sample(&sample, 64);
    let mut lines = Vec::new();
    for kind in [BackboneKind::ResnetFpn, BackboneKind::APanet, BackboneKind::Hrnet] {
        let config = ModelConfig::toy(kind);
        let model = MaskRcnn::new(config.clone(), 7).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let step = model.training_step(&target, PlanSource::Sample(&mut rng)).map_err(|e| e.to_string())?;
        let plan = step.plan.clone();
        let grads = step.graph.backward(step.total).params(&model.params);
        let loss_at = |params: ParamStore| -> f64 {
            let m = MaskRcnn { config: config.clone(), params };
            let s = m.training_step(&target, PlanSource::Fixed(&plan)).expect("fixed-plan step");
            s.graph.value(s.total).item()
        };
        let flat: Vec<(String, usize)> = model
            .params
            .iter()
            .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
            .collect();
        let k = flat.len().div_ceil(100);
        let order = index::sample(&mut rng, flat.len(), flat.len());
        let central = |name: &str, i: usize, h: f64| {
            let mut plus = model.params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = model.params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            (loss_at(plus) - loss_at(minus)) / (2.0 * h)
        };
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let (h, mut checked, mut kinked) = (1e-5, 0usize, 0usize);
        let mut worst: f64 = 0.0;
        for p in order.iter() {
            if checked == k {
                break;
            }
            let (name, i) = &flat[p];
            let numeric = central(name, *i, h);
            // A ReLU or max switching inside the stencil makes the two step
            // sizes disagree; such points are not differentiable there.
            if rel(numeric, central(name, *i, h / 2.0)) > 1e-5 {
                kinked += 1;
                continue;
            }
            let analytic = grads[name].data()[*i];
            let r = rel(analytic, numeric);
            ensure(r < 1e-4, || {
                format!("{}: {name}[{i}] analytic {analytic:.6e} numeric {numeric:.6e} rel {r:.2e}", kind.as_str())
            })?;
            worst = worst.max(r);
            checked += 1;
        }
        ensure(checked == k && kinked * 10 <= k, || format!("{}: {kinked} kinked points for {checked} checked", kind.as_str()))?;
        lines.push(format!("{} {k}/{} params max rel {worst:.1e} ({kinked} kinks skipped)", kind.as_str(), flat.len()));
    }
    within(t0.elapsed(), 300)?;
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- 5

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Gate of the attention block for `feature` with projection weights
/// scaled up so that the gate is far from uniform.
fn attention_gate(feature: &Tensor, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let c = feature.shape()[1];
    let mut store = ParamStore::default();
    store.insert("att.proj.w", random_tensor(rng, &[1, c, 1, 1], 1.0));
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store);
    let x = ctx.constant(feature.clone());
    let logits = ctx.conv("att.proj", x, 1, 1, 1, false, WeightInit::HE);
    let gate = ctx.g.spatial_softmax(logits);
    let out = crackseg::backbones::spatial_attention(&mut ctx, "att", x);
    (ctx.g.value(gate).clone(), ctx.g.value(out).clone())
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
        let f = random_tensor(&mut rng, &[1, 4, h, w], 3.0);
        let (gate, _) = attention_gate(&f, &mut rng);
        let dev = (gate.sum() - (h * w) as f64).abs();
        ensure(dev < 1e-5, || format!("gate sums to {} for {h}x{w}", gate.sum()))?;
        worst_sum = worst_sum.max(dev);
    }
    let mut worst_const: f64 = 0.0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
        let levels: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let f = Tensor::from_vec(&[1, 4, h, w], (0..4 * h * w).map(|i| levels[i / (h * w)]).collect());
        let (_, out) = attention_gate(&f, &mut rng);
        let dev = out.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(dev < 1e-6, || format!("constant input changed by {dev:.2e}"))?;
        worst_const = worst_const.max(dev);
    }
    let mut cfg = BackboneConfig::toy(BackboneKind::APanet);
    cfg.attention_enabled = false;
    let model_cfg = ModelConfig {
        backbone: cfg.clone(),
        ..ModelConfig::toy(BackboneKind::APanet)
    };
    let model = MaskRcnn::new(model_cfg, 9).map_err(|e| e.to_string())?;
    let image = random_tensor(&mut rng, &[1, 3, 64, 96], 1.0);
    let run = |plain: bool| -> Result<Vec<Tensor>, String> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &model.params);
        let x = ctx.constant(image.clone());
        let p = if plain {
            let fpn = resnet_fpn_forward(&mut ctx, &cfg, x).map_err(|e| e.to_string())?;
            panet_bottom_up(&mut ctx, &fpn).map_err(|e| e.to_string())?
        } else {
            backbone_forward(&mut ctx, &cfg, x).map_err(|e| e.to_string())?
        };
        Ok(p.levels.iter().map(|&v| ctx.g.value(v).clone()).collect())
    };
    let (a, b) = (run(false)?, run(true)?);
    let bits = |ts: &[Tensor]| -> Vec<u64> { ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    ensure(bits(&a) == bits(&b), || "attention-disabled output differs from the plain PANet path".into())?;
    Ok(format!(
        "gate sum deviation {worst_sum:.1e}; constant-input deviation {worst_const:.1e}; disabled path bitwise equal"
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Check {
    let image = Tensor::zeros(&[1, 3, 256, 256]);
    let mut notes = Vec::new();
    for kind in [BackboneKind::Hrnet, BackboneKind::APanet, BackboneKind::ResnetFpn] {
        let cfg = BackboneConfig::paper(kind);
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let mut ctx = Ctx::initializing(&mut g, &mut store, &mut rng);
        let x = ctx.constant(image.clone());
        if kind == BackboneKind::Hrnet {
            let branches = hrnet_branches(&mut ctx, &cfg, x).map_err(|e| e.to_string())?;
            let shapes: Vec<Vec<usize>> = branches.iter().map(|&b| ctx.g.shape(b).to_vec()).collect();
            let expected: Vec<Vec<usize>> = (0..4).map(|b| vec![1, 32 << b, 64 >> b, 64 >> b]).collect();
            ensure(shapes == expected, || format!("hrnet stage-4 branches {shapes:?}, expected {expected:?}"))?;
        }
        let p = backbone_forward(&mut ctx, &cfg, x).map_err(|e| e.to_string())?;
        ensure(p.strides == [4, 8, 16, 32], || format!("{} strides {:?}", kind.as_str(), p.strides))?;
        let shapes = p.shapes(ctx.g);
        let expected: Vec<Vec<usize>> = [4usize, 8, 16, 32].iter().map(|s| vec![1, 256, 256 / s, 256 / s]).collect();
        ensure(shapes == expected, || format!("{} pyramid {shapes:?}", kind.as_str()))?;
        notes.push(kind.as_str());
    }
    Ok(format!("256x256: hrnet branches 32/64/128/256 ch at 64/32/16/8 px; pyramids of {notes:?} at strides 4/8/16/32"))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = common::synthetic(dir.path(), 5, 1, 7);
    let samples: Vec<Sample> = data.records().iter().map(|r| load_sample(&data, r).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut detections = 0;
    for i in 0..50 {
        let kind = [BackboneKind::APanet, BackboneKind::Hrnet, BackboneKind::ResnetFpn][i % 3];
        let model = MaskRcnn::new(ModelConfig::toy(kind), 100 + i as u64).map_err(|e| e.to_string())?;
        let image = &samples[i % samples.len()].image;
        let at = |t: f64| {
            model.predict(
                image,
                &PredictConfig {
                    score_threshold: t,
                    ..Default::default()
                },
            )
        };
        let (hi, lo) = (at(0.5).map_err(|e| e.to_string())?, at(0.2).map_err(|e| e.to_string())?);
        for d in &hi {
            ensure(lo.iter().any(|e| e.bbox == d.bbox && e.score == d.score), || format!("prediction {i}: detection at 0.5 missing at 0.2"))?;
        }
        for d in &lo {
            let (m5, m05) = (d.mask_at(0.5), d.mask_at(0.05));
            ensure(m5.0.iter().zip(m05.0.iter()).all(|(&a, &b)| !a || b), || format!("prediction {i}: mask at 0.5 not within mask at 0.05"))?;
        }
        detections += lo.len();
        // Random probability grids exercise the pasting step directly.
        let raw: Vec<f64> = (0..28 * 28).map(|_| rng.random::<f64>()).collect();
        let b = BBox::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), rng.random_range(31.0..64.0), rng.random_range(31.0..64.0));
        let (m5, m05) = (paste_mask(&raw, 28, &b, 64, 64, 0.5), paste_mask(&raw, 28, &b, 64, 64, 0.05));
        ensure(m5.0.iter().zip(m05.0.iter()).all(|(&a, &b)| !a || b), || format!("grid {i}: mask at 0.5 not within mask at 0.05"))?;
    }
    ensure(detections > 0, || "no detections to compare".into())?;
    Ok(format!("50 predictions ({detections} detections at 0.2) and 50 random grids nested"))
}

// ---------------------------------------------------------------- 8

fn tight(m: &BinaryMask) -> Option<BBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &v) in m.0.indexed_iter() {
        if v {
            b = Some(match b {
                None => (c, r, c, r),
                Some((x1, y1, x2, y2)) => (x1.min(c), y1.min(r), x2.max(c), y2.max(r)),
            });
        }
    }
    b.map(|(x1, y1, x2, y2)| BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64))
}

fn random_sample(rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = (rng.random_range(12..48), rng.random_range(12..48));
    let image = Array3::from_shape_fn((h, w, 3), |_| rng.random::<u8>());
    let mut masks = Vec::new();
    for _ in 0..rng.random_range(0..4) {
        let poly: Vec<(f64, f64)> = (0..rng.random_range(3..7))
            .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
            .collect();
        let m = rasterize_polygon(&poly, w, h);
        if m.0.iter().any(|&v| v) {
            masks.push(m);
        }
    }
    let boxes = masks.iter().map(|m| tight(m).unwrap()).collect();
    Sample {
        image,
        masks,
        boxes,
        scene_level: SceneLevel::Unknown,
    }
}

fn random_policy(rng: &mut ChaCha8Rng) -> AugmentPolicy {
    let mut ops = Vec::new();
    if rng.random_bool(0.5) {
        ops.push(AugmentOp::Hflip { p: rng.random() });
    }
    if rng.random_bool(0.5) {
        ops.push(AugmentOp::Vflip { p: rng.random() });
    }
    if rng.random_bool(0.5) {
        ops.push(AugmentOp::Rotate90 { p: rng.random() });
    }
    if rng.random_bool(0.6) {
        ops.push(AugmentOp::RandomCrop {
            p: rng.random(),
            min_fraction: rng.random_range(0.3..=1.0),
        });
    }
    ops.shuffle(rng);
    AugmentPolicy { ops, seed: rng.random() }
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut instances = 0;
    for draw in 0..500 {
        let policy = random_policy(&mut rng);
        let sample = random_sample(&mut rng);
        let mut arng = policy.rng_for(0, draw);
        let out = apply(&policy, sample.clone(), &mut arng).map_err(|e| e.to_string())?;
        let s = &out.sample;
        ensure(s.masks.len() == s.boxes.len(), || format!("draw {draw}: {} masks, {} boxes", s.masks.len(), s.boxes.len()))?;
        for (m, b) in s.masks.iter().zip(&s.boxes) {
            let t = tight(m).ok_or_else(|| format!("draw {draw}: empty mask kept"))?;
            ensure(t.max_abs_diff(b) <= 1.0, || format!("draw {draw}: box {b:?} vs mask bounds {t:?}"))?;
            ensure((m.height(), m.width()) == (s.height(), s.width()), || format!("draw {draw}: mask size differs from image"))?;
            instances += 1;
        }
        for op in [AugmentOp::Hflip { p: 1.0 }, AugmentOp::Vflip { p: 1.0 }] {
            let flip = AugmentPolicy { ops: vec![op], seed: 0 };
            let f = apply(&flip, sample.clone(), &mut arng).map_err(|e| e.to_string())?.sample;
            let before: Vec<usize> = sample.masks.iter().map(|m| m.0.iter().filter(|&&v| v).count()).collect();
            let after: Vec<usize> = f.masks.iter().map(|m| m.0.iter().filter(|&&v| v).count()).collect();
            ensure(before == after, || format!("draw {draw}: {op:?} changed pixel counts {before:?} -> {after:?}"))?;
        }
    }
    Ok(format!("500 draws, {instances} transformed instances consistent; flips preserve pixel counts"))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = common::synthetic(&dir.path().join("data"), 5, 1, 0);
    let mut notes = Vec::new();
    for kind in [BackboneKind::APanet, BackboneKind::Hrnet] {
        let config = common::toy_config(kind, 60);
        let out = train(&config, &data, None, &dir.path().join(kind.as_str()), None).map_err(|e| e.to_string())?;
        let iterations: u64 = out.log.iter().map(|e| e.iterations).sum();
        ensure(iterations <= 300, || format!("{iterations} iterations"))?;
        let report = evaluate(&out.last, &data, &config, kind.as_str()).map_err(|e| e.to_string())?;
        let ap50 = report.mask_ap.map(|r| r.ap50).unwrap_or(0.0);
        let note = format!("{} mask AP50 {ap50:.1}, accuracy {:.0}%", kind.as_str(), 100.0 * report.prf.accuracy);
        ensure(ap50 >= 90.0 && report.prf.accuracy == 1.0, || note.clone())?;
        notes.push(note);
    }
    within(t0.elapsed(), 900)?;
    Ok(format!("{} after 300 iterations ({:.0}s)", notes.join("; "), t0.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = common::synthetic(&dir.path().join("data"), 4, 1, 10);
    let config = crackseg::pipeline::RunConfig {
        epochs: 2,
        batch_size: 2,
        lr: 0.01,
        seed: 10,
        ..crackseg::pipeline::RunConfig::toy(BackboneKind::APanet)
    };
    let mut ckpts = Vec::new();
    let mut reports = BTreeSet::new();
    for run in 0..2 {
        let out_dir = dir.path().join(format!("run{run}"));
        let out = train(&config, &data, None, &out_dir, None).map_err(|e| e.to_string())?;
        ckpts.push(std::fs::read(out_dir.join(LAST_CHECKPOINT)).map_err(|e| e.to_string())?);
        for _ in 0..2 {
            let r = evaluate(&out.last, &data, &config, "run").map_err(|e| e.to_string())?;
            reports.insert(serde_json::to_string_pretty(&r).unwrap());
        }
    }
    ensure(ckpts[0] == ckpts[1], || "checkpoints differ between identical runs".into())?;
    ensure(reports.len() == 1, || format!("{} distinct evaluation reports", reports.len()))?;
    Ok(format!("two runs: identical {}-byte checkpoints, one distinct report across four evaluations", ckpts[0].len()))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Check); 10] = [
        (1, "metric oracle equivalence", criterion_1),
        (2, "recall/precision/accuracy round-trip", criterion_2),
        (3, "RoIAlign dense oracle and constant fields", criterion_3),
        (4, "gradient checks", criterion_4),
        (5, "attention properties", criterion_5),
        (6, "HRNet/PANet shape invariants", criterion_6),
        (7, "threshold semantics", criterion_7),
        (8, "augmentation consistency", criterion_8),
        (9, "overfit sanity", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let mut unexpected = 0;
    for (id, name, check) in criteria {
        let t0 = Instant::now();
        let result = check();
        let secs = t0.elapsed().as_secs_f64();
        let known_red = KNOWN_RED.contains(&id);
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) if known_red => ("FAIL (known: published figures are inconsistent)", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {status}: {name} ({secs:.1}s) {detail}");
        if result.is_ok() == known_red {
            unexpected += 1;
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} criterion outcome(s) differ from expectation");
        ExitCode::FAILURE
    }
}
