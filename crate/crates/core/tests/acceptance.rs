//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line; the
//! process exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use attrib_core::eval::{refine, run, BaselineSpec, RefineConfig, RunRequest};
use attrib_core::fixtures::{self, TOY_CNN_STAGES};
use attrib_core::gradcheck::{finite_diff_gradient, relative_deviation, KINK_MARGIN};
use attrib_core::ops::Primitive;
use attrib_core::render::{image_pixels, overlay_pixels, render_heatmap, Heatmap};
use attrib_core::tape::forward_eval;
use attrib_core::{
    gradient_times_input, integrated_gradients, layer_integrated_gradients, taylor_first_order,
    Method, Model, PathSpec, Target, Tensor,
};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lib<T>(r: attrib_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("error: {e}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Predicted class, explained in logit space.
fn top_class(model: &Model, x: &Tensor) -> Result<Target, String> {
    let y = lib(model.forward(x))?;
    let index = y
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    Ok(Target::logit(index))
}

fn saturation() -> Outcome {
    let started = Instant::now();
    let model = fixtures::saturation();
    let view = lib(model.split(0))?;
    let x = Tensor::scalar(2.0);
    let zero = Tensor::scalar(0.0);
    let gi = lib(gradient_times_input(&view, &x, Target::logit(0)))?;
    let (ig, report) = lib(layer_integrated_gradients(
        &model,
        &x,
        &zero,
        0,
        PathSpec::right(512),
        Target::logit(0),
    ))?;
    let elapsed = started.elapsed();
    let gi_sum = gi.attribution_sum();
    let ig_sum = ig.attribution_sum();
    check(
        gi_sum == 0.0
            && (0.996..=1.004).contains(&ig_sum)
            && report.delta == 1.0
            && elapsed < Duration::from_secs(1),
        format!(
            "grad*input={gi_sum}, IG(m=512)={ig_sum:.6}, delta={}, {:.1} ms",
            report.delta,
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn unification() -> Outcome {
    let started = Instant::now();
    let mut rng = fixtures::rng(11);
    let mut worst_gi = 0.0f64;
    let mut worst_taylor = 0.0f64;
    for seed in 0..25 {
        let model = fixtures::random_mlp(seed);
        let view = lib(model.split(0))?;
        let x = uniform(&mut rng, model.input_shape(), -1.0, 1.0);
        let base = uniform(&mut rng, model.input_shape(), -1.0, 1.0);
        let zero = Tensor::zeros(model.input_shape());
        let outputs = model.output_shape()[0];
        let target = Target::logit(seed as usize % outputs);

        let ig_right = lib(integrated_gradients(&view, &x, &zero, PathSpec::right(1), target))?;
        let gi = lib(gradient_times_input(&view, &x, target))?;
        worst_gi = worst_gi.max(ig_right.feature_map.max_abs_diff(&gi.feature_map));

        let ig_left = lib(integrated_gradients(&view, &x, &base, PathSpec::left(1), target))?;
        let taylor = lib(taylor_first_order(&view, &x, &base, target))?;
        worst_taylor = worst_taylor.max(ig_left.feature_map.max_abs_diff(&taylor.feature_map));
    }
    let elapsed = started.elapsed();
    check(
        worst_gi < 1e-12 && worst_taylor < 1e-12 && elapsed < Duration::from_secs(10),
        format!(
            "25 MLPs, max |IG right m=1 - grad*input| = {worst_gi:e}, \
             max |IG left m=1 - Taylor| = {worst_taylor:e}, {:.1} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn completeness() -> Outcome {
    let started = Instant::now();
    let splits: Vec<usize> = std::iter::once(0).chain(TOY_CNN_STAGES).collect();
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    let mut fine_rel = Vec::new();
    for i in 0..50u64 {
        let model = fixtures::toy_cnn(100 + i);
        let x = fixtures::random_image(1000 + i);
        let zero = Tensor::zeros(model.input_shape());
        let target = top_class(&model, &x)?;
        let split = splits[i as usize % splits.len()];
        let at = |m| lib(layer_integrated_gradients(&model, &x, &zero, split, PathSpec::right(m), target));
        coarse.push(at(8)?.1.abs_error);
        let (_, r) = at(1024)?;
        fine.push(r.abs_error);
        fine_rel.push(r.rel_error.unwrap_or(f64::INFINITY));
    }
    let elapsed = started.elapsed();
    let (mc, mf, mr) = (median(coarse), median(fine), median(fine_rel));
    check(
        mf < mc && mr < 1e-2 && elapsed < Duration::from_secs(120),
        format!(
            "50 toy-CNN pairs, median abs_error m=8 {mc:.3e} -> m=1024 {mf:.3e}, \
             median rel_error m=1024 {mr:.3e}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn request<'m>(model: &'m Model, x: &Tensor, split: usize, method: Method, target: Target) -> RunRequest<'m> {
    RunRequest {
        model,
        input: x.clone(),
        baseline: BaselineSpec::zeros(model),
        split_index: split,
        method,
        path: PathSpec::right(1),
        target,
    }
}

fn degeneracy() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut original_worse = 0;
    for i in 0..20u64 {
        let model = fixtures::toy_cnn(200 + i);
        let x = fixtures::random_image(2000 + i);
        let target = top_class(&model, &x)?;
        for &split in &TOY_CNN_STAGES {
            let view = lib(model.split(split))?;
            let a = lib(view.forward_head(&x))?;
            let zero = Tensor::zeros(view.feature_shape());
            let ig = lib(integrated_gradients(&view, &a, &zero, PathSpec::right(1), target))?;
            let (modified, mod_report) = lib(run(&request(&model, &x, split, Method::LayercamMod, target)))?;
            let (odam, _) = lib(run(&request(&model, &x, split, Method::Odam, target)))?;
            let (_, orig_report) = lib(run(&request(&model, &x, split, Method::Layercam, target)))?;
            for other in [&modified, &odam] {
                worst = worst
                    .max(other.feature_map.max_abs_diff(&ig.feature_map))
                    .max(other.collapsed.max_abs_diff(&ig.collapsed));
            }
            cases += 1;
            if orig_report.abs_error >= mod_report.abs_error {
                original_worse += 1;
            }
        }
    }
    let share = original_worse as f64 / cases as f64;
    check(
        worst < 1e-12 && share >= 0.9,
        format!(
            "{cases} cases, max |layercam-mod / odam - IG m=1| = {worst:e}, \
             original abs_error >= modified on {original_worse}/{cases} ({:.0}%)",
            share * 100.0
        ),
    )
}

fn depth_trend() -> Outcome {
    let model = fixtures::toy_cnn(300);
    let shallow = TOY_CNN_STAGES[0];
    let deep = TOY_CNN_STAGES[TOY_CNN_STAGES.len() - 1];
    let zero = Tensor::zeros(model.input_shape());
    let mut single_ok = 0;
    let mut signed_ok = 0;
    let mut ig_shallow = Vec::new();
    let mut ig_deep = Vec::new();
    for i in 0..20u64 {
        let x = fixtures::random_image(3000 + i);
        let target = top_class(&model, &x)?;
        let single = |split, method| lib(run(&request(&model, &x, split, method, target))).map(|r| r.1.abs_error);
        if single(deep, Method::Layercam)? <= single(shallow, Method::Layercam)? {
            single_ok += 1;
        }
        if single(deep, Method::LayercamMod)? <= single(shallow, Method::LayercamMod)? {
            signed_ok += 1;
        }
        let ig = |split| {
            lib(layer_integrated_gradients(&model, &x, &zero, split, PathSpec::right(64), target))
                .map(|r| r.1.abs_error)
        };
        ig_shallow.push(ig(shallow)?);
        ig_deep.push(ig(deep)?);
    }
    let (ms, md) = (median(ig_shallow), median(ig_deep));
    check(
        single_ok >= 14 && md <= ms,
        format!(
            "layercam deep <= shallow on {single_ok}/20 (layercam-mod {signed_ok}/20, not gated); \
             IG m=64 median abs_error split {shallow} {ms:.3e}, split {deep} {md:.3e}"
        ),
    )
}

fn refinement() -> Outcome {
    let model = fixtures::sawtooth();
    let req = RunRequest {
        model: &model,
        input: Tensor::scalar(1.0),
        baseline: BaselineSpec::zeros(&model),
        split_index: 0,
        method: Method::Ig,
        path: PathSpec::right(256),
        target: Target::logit(0),
    };
    let config = RefineConfig::default();
    let (_, coarse) = lib(run(&req))?;
    let (_, refined) = lib(refine(&req, config))?;
    let coarse_rel = coarse.rel_error.ok_or("coarse rel_error undefined")?;
    let fine_rel = refined.rel_error.ok_or("refined rel_error undefined")?;
    check(
        coarse_rel > config.threshold && refined.refined && refined.steps == Some(2000) && fine_rel < coarse_rel,
        format!(
            "sawtooth coarse m=256 rel_error {coarse_rel:.4}, refined m={:?} rel_error {fine_rel:.3e}",
            refined.steps.unwrap_or(0)
        ),
    )
}

fn gradient_oracle() -> Outcome {
    let mut rng = fixtures::rng(21);
    let linear_w = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let conv_w = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = uniform(&mut rng, &[3], -1.0, 1.0);
    let cases: Vec<(Primitive, Vec<usize>)> = vec![
        (Primitive::Linear { weight: &linear_w }, vec![6]),
        (
            Primitive::Conv2d {
                weight: &conv_w,
                stride: [2, 1],
                padding: [1, 1],
            },
            vec![2, 5, 6],
        ),
        (Primitive::AddBias { bias: &bias }, vec![3, 4, 4]),
        (Primitive::Relu, vec![2, 3, 3]),
        (Primitive::Sigmoid, vec![2, 3, 3]),
        (Primitive::Softmax, vec![2, 3, 3]),
        (
            Primitive::MaxPool2d {
                kernel: [3, 2],
                stride: [2, 1],
            },
            vec![2, 5, 6],
        ),
        (
            Primitive::AvgPool2d {
                kernel: [2, 3],
                stride: [1, 2],
            },
            vec![2, 5, 6],
        ),
        (Primitive::Flatten, vec![2, 3, 3]),
    ];
    let mut lines = Vec::new();
    let mut all_ok = true;
    for (op, shape) in cases {
        let ops = [op];
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let mut x = uniform(&mut rng, &shape, -1.0, 1.0);
            for _ in 0..100 {
                if lib(forward_eval(&ops, &x))?.tape.kink_margin() >= KINK_MARGIN {
                    break;
                }
                x = uniform(&mut rng, &shape, -1.0, 1.0);
            }
            let eval = lib(forward_eval(&ops, &x))?;
            let seed = uniform(&mut rng, eval.output_value().shape(), -1.0, 1.0);
            let analytic = lib(eval.tape.backward_seeded(eval.output, &seed, eval.input))?;
            let numeric = lib(finite_diff_gradient(
                |t| {
                    let y = forward_eval(&ops, t)?;
                    Ok(y.output_value().data().iter().zip(seed.data()).map(|(a, b)| a * b).sum())
                },
                &x,
                1e-6,
            ))?;
            worst = worst.max(relative_deviation(&analytic, &numeric));
        }
        all_ok &= worst < 1e-5;
        lines.push(format!("{} {worst:.1e}", op.name()));
    }
    check(all_ok, format!("20 points each, max relative deviation: {}", lines.join(", ")))
}

const GOLDEN_2X2: &[u8] = b"P6\n2 2\n255\n\xff\x00\x00\x00\x00\xff\xff\xff\xff\xff\x80\x80";

fn render_goldens() -> Outcome {
    let map = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.5]).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("map.ppm");
    lib(render_heatmap(&map, &out))?;
    let written = std::fs::read(&out).map_err(|e| e.to_string())?;
    let stored = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/map_2x2.ppm"))
        .map_err(|e| e.to_string())?;
    // Scaling the map leaves the picture unchanged.
    let scaled = lib(Heatmap::from_map(&map.map(|v| 3.0 * v)))?.to_ppm();

    let mut rng = fixtures::rng(31);
    let image = uniform(&mut rng, &[3, 4, 4], 0.0, 1.0);
    let (_, _, opaque) = lib(overlay_pixels(&image, &map, 1.0))?;
    let (w, h, clear) = lib(overlay_pixels(&image, &map, 0.0))?;
    let upsampled = lib(Heatmap::from_map(&map))?.resized(4, 4);
    let alpha_one = opaque == lib(image_pixels(&image))?;
    let alpha_zero = (w, h) == (4, 4) && clear == upsampled.pixels;
    check(
        written == GOLDEN_2X2 && stored == GOLDEN_2X2 && scaled == GOLDEN_2X2 && alpha_one && alpha_zero,
        format!(
            "2x2 PPM golden match {}, scale invariant {}, overlay alpha=1 identity {alpha_one}, \
             alpha=0 identity {alpha_zero}",
            written == GOLDEN_2X2 && stored == GOLDEN_2X2,
            scaled == GOLDEN_2X2
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("saturation", saturation),
        ("unification", unification),
        ("completeness-convergence", completeness),
        ("layercam-odam-degeneracy", degeneracy),
        ("depth-trend", depth_trend),
        ("refinement", refinement),
        ("gradient-oracle", gradient_oracle),
        ("render-goldens", render_goldens),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
