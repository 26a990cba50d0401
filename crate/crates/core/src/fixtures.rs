//! Deterministic analytic and random models used by tests, the acceptance
//! suite, and the `gen-fixtures` command.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scalar_weight(w: f64) -> Tensor {
    Tensor::new(vec![1, 1], vec![w]).expect("1x1")
}

/// `F(x) = 1 - ReLU(1 - x)` on a single input.
pub fn saturation() -> Model {
    Model::new(
        "saturation",
        vec![1],
        vec![
            LayerSpec::linear(scalar_weight(-1.0), Tensor::scalar(1.0)),
            LayerSpec::Relu,
            LayerSpec::linear(scalar_weight(-1.0), Tensor::scalar(1.0)),
        ],
    )
    .expect("valid fixture")
}

/// Single affine layer `y = W x + b` with `W` shaped `[out, in]`.
pub fn linear(weights: &[&[f64]], bias: &[f64]) -> Model {
    let out = weights.len();
    let inp = weights[0].len();
    let weight = Tensor::new(vec![out, inp], weights.concat()).expect("rectangular weights");
    Model::new(
        "linear",
        vec![inp],
        vec![LayerSpec::linear(weight, Tensor::from_vec(bias.to_vec()))],
    )
    .expect("valid fixture")
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// He-uniform linear layer.
fn random_linear(rng: &mut impl Rng, inp: usize, out: usize, bias_bound: f64) -> LayerSpec {
    let bound = (6.0 / inp as f64).sqrt();
    LayerSpec::linear(uniform(rng, &[out, inp], bound), uniform(rng, &[out], bias_bound))
}

fn random_conv(rng: &mut impl Rng, inp: usize, out: usize) -> LayerSpec {
    let bound = (6.0 / (inp * 9) as f64).sqrt();
    LayerSpec::conv2d(
        uniform(rng, &[out, inp, 3, 3], bound),
        uniform(rng, &[out], 0.1),
        [1, 1],
        [1, 1],
    )
}

/// Random MLP with at most three linear layers of width at most 16, ReLU or
/// sigmoid between them.
pub fn random_mlp(seed: u64) -> Model {
    let mut rng = rng(seed);
    let depth = rng.gen_range(1..=3);
    let mut width = rng.gen_range(2..=8);
    let input = width;
    let mut layers = Vec::new();
    for i in 0..depth {
        let out = if i + 1 == depth {
            rng.gen_range(1..=4)
        } else {
            rng.gen_range(2..=16)
        };
        layers.push(random_linear(&mut rng, width, out, 0.5));
        if i + 1 < depth {
            layers.push(if rng.gen_bool(0.5) {
                LayerSpec::Relu
            } else {
                LayerSpec::Sigmoid
            });
        }
        width = out;
    }
    Model::new(format!("mlp-{seed}"), vec![input], layers).expect("valid fixture")
}

/// Two-layer sigmoid network, smooth everywhere.
pub fn random_smooth_mlp(seed: u64, input: usize, hidden: usize, output: usize) -> Model {
    let mut rng = rng(seed);
    Model::new(
        format!("smooth-{seed}"),
        vec![input],
        vec![
            random_linear(&mut rng, input, hidden, 0.5),
            LayerSpec::Sigmoid,
            random_linear(&mut rng, hidden, output, 0.5),
        ],
    )
    .expect("valid fixture")
}

pub const TOY_CNN_INPUT: [usize; 3] = [3, 16, 16];

/// Split indices at the end of each of the toy CNN's five stages, shallow
/// to deep. Each lands just after a ReLU.
pub const TOY_CNN_STAGES: [usize; 5] = [2, 5, 8, 11, 13];

/// Five-stage VGG-style classifier over `3x16x16` inputs with ten softmax
/// outputs.
pub fn toy_cnn(seed: u64) -> Model {
    let mut rng = rng(seed);
    let pool = || LayerSpec::MaxPool2d {
        kernel: [2, 2],
        stride: [2, 2],
    };
    let layers = vec![
        random_conv(&mut rng, 3, 4), // 0
        LayerSpec::Relu,             // 1 -> stage 1 ends at 2
        pool(),                      // 2
        random_conv(&mut rng, 4, 6), // 3
        LayerSpec::Relu,             // 4 -> stage 2 ends at 5
        pool(),                      // 5
        random_conv(&mut rng, 6, 8), // 6
        LayerSpec::Relu,             // 7 -> stage 3 ends at 8
        pool(),                      // 8
        random_conv(&mut rng, 8, 8), // 9
        LayerSpec::Relu,             // 10 -> stage 4 ends at 11
        random_conv(&mut rng, 8, 8), // 11
        LayerSpec::Relu,             // 12 -> stage 5 ends at 13
        LayerSpec::Flatten,          // 13
        random_linear(&mut rng, 32, 16, 0.1),
        LayerSpec::Relu,
        random_linear(&mut rng, 16, 10, 0.1),
        LayerSpec::Softmax,
    ];
    Model::new(format!("toy-cnn-{seed}"), TOY_CNN_INPUT.to_vec(), layers).expect("valid fixture")
}

/// Uniform `[0, 1)` image for the toy CNN.
pub fn random_image(seed: u64) -> Tensor {
    let mut rng = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = TOY_CNN_INPUT.iter().product();
    Tensor::new(TOY_CNN_INPUT.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).expect("shape")
}

/// Small conv / relu / maxpool / flatten / linear / softmax model with zero
/// biases, so an all-zero image gives a uniform softmax.
pub fn vgg_like_zero_bias(seed: u64) -> Model {
    let mut rng = rng(seed);
    let conv = LayerSpec::conv2d(
        uniform(&mut rng, &[4, 3, 3, 3], 0.5),
        Tensor::zeros(&[4]),
        [1, 1],
        [0, 0],
    );
    Model::new(
        "vgg-like",
        vec![3, 6, 6],
        vec![
            conv,
            LayerSpec::Relu,
            LayerSpec::MaxPool2d {
                kernel: [2, 2],
                stride: [2, 2],
            },
            LayerSpec::Flatten,
            LayerSpec::linear(uniform(&mut rng, &[5, 16], 0.5), Tensor::zeros(&[5])),
            LayerSpec::Softmax,
        ],
    )
    .expect("valid fixture")
}

/// Half-period of the sawtooth, in input units.
pub const SAWTOOTH_HALF_PERIOD: f64 = 1.0 / 512.0;
/// Net slope added to the sawtooth so `F(1) - F(0)` is this value.
pub const SAWTOOTH_DRIFT: f64 = 0.5;

/// One-input ReLU network whose derivative on `[0, 1]` alternates `+1/-1`
/// with period `1/256`, plus a small drift. Knots sit half a grid cell off
/// the 256-step right-point grid, so every coarse sample lands on a `+1`
/// segment while the exact integral is just the drift.
pub fn sawtooth() -> Model {
    let knots = 512;
    let hidden = knots + 1;
    let mut w1 = vec![1.0; hidden];
    let mut b1 = vec![1.0; hidden];
    let mut w2 = vec![0.0; hidden];
    // Unit 0 is relu(x + 1), linear on the domain: carries slope 1 + drift.
    w1[0] = 1.0;
    w2[0] = 1.0 + SAWTOOTH_DRIFT;
    for j in 1..=knots {
        let knot = j as f64 * SAWTOOTH_HALF_PERIOD - SAWTOOTH_HALF_PERIOD / 2.0;
        b1[j] = -knot;
        w2[j] = if j % 2 == 0 { 2.0 } else { -2.0 };
    }
    Model::new(
        "sawtooth",
        vec![1],
        vec![
            LayerSpec::linear(Tensor::new(vec![hidden, 1], w1).expect("shape"), Tensor::from_vec(b1)),
            LayerSpec::Relu,
            LayerSpec::linear(Tensor::new(vec![1, hidden], w2).expect("shape"), Tensor::scalar(0.0)),
        ],
    )
    .expect("valid fixture")
}

/// Writes the fixture set into `dir` and returns the files written.
///
/// Contents: the saturation model and its input `x = 2`; the linear model
/// `W = [[2, -3]]` with input `[1, 1]`; the sawtooth model with input `1`;
/// a toy CNN with `images` random inputs; and a demo batch manifest over
/// all of them.
pub fn write_fixture_set(dir: &Path, seed: u64, images: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let put_model = |name: &str, m: &Model, written: &mut Vec<PathBuf>| -> Result<()> {
        let p = dir.join(name);
        m.save(&p)?;
        written.push(p);
        Ok(())
    };
    put_model("saturation.model.json", &saturation(), &mut written)?;
    put_model("lin.model.json", &linear(&[&[2.0, -3.0]], &[0.0]), &mut written)?;
    put_model("sawtooth.model.json", &sawtooth(), &mut written)?;
    put_model("toy_cnn.model.json", &toy_cnn(seed), &mut written)?;

    let mut put_tensor = |name: String, t: &Tensor| -> Result<()> {
        let p = dir.join(name);
        t.save(&p)?;
        written.push(p);
        Ok(())
    };
    put_tensor("saturation_x.tensor.json".into(), &Tensor::scalar(2.0))?;
    put_tensor("lin_x.tensor.json".into(), &Tensor::from_vec(vec![1.0, 1.0]))?;
    put_tensor("sawtooth_x.tensor.json".into(), &Tensor::scalar(1.0))?;
    let image_names: Vec<String> = (0..images).map(|i| format!("toy_cnn_x{i}.tensor.json")).collect();
    for (i, name) in image_names.iter().enumerate() {
        put_tensor(name.clone(), &random_image(seed.wrapping_add(i as u64)))?;
    }

    let mut jobs = vec![
        json!({"model": "lin.model.json", "input": "lin_x.tensor.json", "baseline": "zeros",
               "splits": [0], "methods": ["ig", "grad-input"], "targets": ["0:logit"], "steps": 256}),
        json!({"model": "saturation.model.json", "input": "saturation_x.tensor.json",
               "baseline": "zeros", "splits": [0], "methods": ["ig", "grad-input", "taylor"],
               "targets": ["0:logit"], "steps": 512}),
    ];
    for name in &image_names {
        jobs.push(json!({
            "model": "toy_cnn.model.json", "input": name, "baseline": "zeros",
            "splits": TOY_CNN_STAGES, "methods": ["ig", "layercam", "layercam-mod", "odam"],
            "targets": ["0:logit"], "steps": 64
        }));
    }
    let manifest = dir.join("demo.manifest.json");
    let text = serde_json::to_string_pretty(&json!({ "format_version": 1, "jobs": jobs }))
        .expect("manifest serialization");
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    written.push(manifest);
    Ok(written)
}
