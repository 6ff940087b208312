//! Capsule-versus-plain timing of single layers and whole networks.
//!
//! A capsule measurement covers allocating enclave buffers, copying the
//! sealed bytes in from the host, unsealing, computing and freeing (with
//! zeroization); a plain measurement covers the computation only. Each
//! repetition runs both back to back so drift affects them alike.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::{digest, RootSealKey, SealKey, SealedBlob, DEFAULT_CHUNK_SIZE};
use crate::error::{Error, Result};
use crate::nn::capsule::{capsule_layer_forward, layer_working_set, seal_layer, seal_model_with_chunk_size};
use crate::nn::{forward, CapsuleLayer, LayerSpec, ModelDef, ModelSecrets, Padding, Tensor, DEFAULT_MEMORY_BUDGET};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
    pub budget: usize,
    pub chunk_size: u32,
    pub seed: u64,
    /// Keep adding timed repetitions past `reps` until the capsule and
    /// plain samples together cover this much time.
    pub min_time_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            reps: 100,
            warmup: 5,
            budget: DEFAULT_MEMORY_BUDGET,
            chunk_size: DEFAULT_CHUNK_SIZE,
            seed: 0,
            min_time_ms: 0.0,
        }
    }
}

impl BenchConfig {
    fn check(&self) -> Result<()> {
        if self.reps == 0 || self.warmup < 5 || !(self.min_time_ms >= 0.0 && self.min_time_ms.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need reps > 0, at least 5 warmup runs and a finite minimum time, got {} / {} / {}",
                self.reps, self.warmup, self.min_time_ms
            )));
        }
        Ok(())
    }
}

/// Published SGX measurement for the same configuration.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct SgxReference {
    pub capsule_ms: f64,
    pub plain_ms: f64,
    pub factor: f64,
}

const fn sgx(capsule_ms: f64, plain_ms: f64, factor: f64) -> Option<SgxReference> {
    Some(SgxReference {
        capsule_ms,
        plain_ms,
        factor,
    })
}

pub fn sgx_dense(size: usize) -> Option<SgxReference> {
    match size {
        256 => sgx(0.234, 0.020, 0.234 / 0.020),
        512 => sgx(0.865, 0.062, 0.865 / 0.062),
        1024 => sgx(4.035, 0.244, 4.035 / 0.244),
        2048 => sgx(26.940, 1.090, 26.940 / 1.090),
        4096 => sgx(96.823, 4.648, 96.823 / 4.648),
        _ => None,
    }
}

pub fn sgx_conv(depthwise: bool, shape: [usize; 3]) -> Option<SgxReference> {
    match (depthwise, shape) {
        (false, [64, 224, 224]) => sgx(80.0, 66.0, 1.21),
        (false, [512, 28, 28]) => sgx(61.0, 51.0, 1.20),
        (false, [512, 14, 14]) => sgx(30.0, 13.0, 2.31),
        (true, [64, 224, 224]) => sgx(41.0, 27.0, 1.52),
        (true, [512, 28, 28]) => sgx(7.0, 7.0, 1.00),
        (true, [512, 14, 14]) => sgx(2.0, 2.0, 1.00),
        _ => None,
    }
}

/// Reference row for a network label such as `vgg16` or `vgg16@32`.
pub fn sgx_network(label: &str) -> Option<SgxReference> {
    match label.split('@').next().unwrap_or(label) {
        "vgg16" => sgx(1145.0, 736.0, 1.55),
        "mobilenet" => sgx(427.0, 197.0, 2.16),
        _ => None,
    }
}

pub const TABLE1_SIZES: [usize; 5] = [256, 512, 1024, 2048, 4096];
pub const TABLE2_SHAPES: [[usize; 3]; 3] = [[64, 224, 224], [512, 28, 28], [512, 14, 14]];

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    BudgetExceeded,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct BenchRow {
    pub label: String,
    pub status: RowStatus,
    pub capsule_mean_ms: Option<f64>,
    pub capsule_std_ms: Option<f64>,
    pub plain_mean_ms: f64,
    pub plain_std_ms: f64,
    pub factor: Option<f64>,
    /// Timed repetitions actually run.
    pub reps: usize,
    /// Bytes the capsule needs at its largest layer.
    pub working_set_bytes: usize,
    pub sgx: Option<SgxReference>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Environment {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
    pub debug_build: bool,
    pub budget_bytes: usize,
    pub chunk_size: u32,
}

impl Environment {
    fn current(cfg: &BenchConfig) -> Self {
        Environment {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            debug_build: cfg!(debug_assertions),
            budget_bytes: cfg.budget,
            chunk_size: cfg.chunk_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct BenchReport {
    pub title: String,
    pub reps: usize,
    pub warmup: usize,
    pub min_time_ms: f64,
    pub environment: Environment,
    pub rows: Vec<BenchRow>,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

impl BenchReport {
    pub fn to_markdown(&self) -> String {
        let env = &self.environment;
        let mut out = format!(
            "### {}\n\nAt least {} repetitions{} after {} warmup runs; {} {} with {} CPUs{}; budget {} MiB, chunk {} KiB.\n\n",
            self.title,
            self.reps,
            if self.min_time_ms > 0.0 {
                format!(" and {:.0} ms of timed work per row", self.min_time_ms)
            } else {
                String::new()
            },
            self.warmup,
            env.os,
            env.arch,
            env.cpus,
            if env.debug_build { " (debug build)" } else { "" },
            env.budget_bytes >> 20,
            env.chunk_size >> 10,
        );
        out.push_str(
            "| Configuration | Capsule (ms) | Plain (ms) | Factor | Reps | SGX capsule (ms) | SGX plain (ms) | SGX factor |\n",
        );
        out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let capsule = match (&r.status, r.capsule_mean_ms) {
                (RowStatus::BudgetExceeded, _) => format!("budget exceeded ({} MiB)", r.working_set_bytes >> 20),
                (_, m) => format!("{} ± {}", fmt_opt(m, 3), fmt_opt(r.capsule_std_ms, 3)),
            };
            out.push_str(&format!(
                "| {} | {} | {:.3} ± {:.3} | {} | {} | {} | {} | {} |\n",
                r.label,
                capsule,
                r.plain_mean_ms,
                r.plain_std_ms,
                fmt_opt(r.factor, 2),
                r.reps,
                fmt_opt(r.sgx.map(|p| p.capsule_ms), 3),
                fmt_opt(r.sgx.map(|p| p.plain_ms), 3),
                fmt_opt(r.sgx.map(|p| p.factor), 2),
            ));
        }
        out
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn bench_key(seed: u64) -> (SealKey, crate::crypto::Digest, ChaCha20Rng) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let m = digest(b"mlcapsule/bench");
    (SealKey::derive(&RootSealKey::generate(&mut rng), &m), m, rng)
}

fn random_tensor(dims: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("dims match data")
}

type Measured = (Option<(f64, f64)>, (f64, f64), usize);

/// Runs `capsule` and `plain` interleaved: warmups first, then at least
/// `reps` timed pairs, continuing until `min_time_ms` is covered.
/// `capsule` is skipped when `None`.
fn measure(
    cfg: &BenchConfig,
    mut capsule: Option<&mut dyn FnMut() -> Result<f32>>,
    plain: &mut dyn FnMut() -> Result<f32>,
) -> Result<Measured> {
    let mut sink = 0f32;
    for _ in 0..cfg.warmup {
        if let Some(c) = capsule.as_mut() {
            sink += c()?;
        }
        sink += plain()?;
    }
    let mut cap = Vec::with_capacity(cfg.reps);
    let mut pla = Vec::with_capacity(cfg.reps);
    let mut total_ms = 0.0;
    while pla.len() < cfg.reps || total_ms < cfg.min_time_ms {
        if let Some(c) = capsule.as_mut() {
            let t = Instant::now();
            sink += black_box(c()?);
            let ms = t.elapsed().as_nanos() as f64 / 1e6;
            cap.push(ms);
            total_ms += ms;
        }
        let t = Instant::now();
        sink += black_box(plain()?);
        let ms = t.elapsed().as_nanos() as f64 / 1e6;
        pla.push(ms);
        total_ms += ms;
    }
    black_box(sink);
    Ok(((!cap.is_empty()).then(|| mean_std(&cap)), mean_std(&pla), pla.len()))
}

fn row(label: String, working_set: usize, (cap, plain, reps): Measured, sgx: Option<SgxReference>) -> BenchRow {
    BenchRow {
        label,
        status: if cap.is_some() {
            RowStatus::Ok
        } else {
            RowStatus::BudgetExceeded
        },
        capsule_mean_ms: cap.map(|c| c.0),
        capsule_std_ms: cap.map(|c| c.1),
        plain_mean_ms: plain.0,
        plain_std_ms: plain.1,
        factor: cap.map(|c| c.0 / plain.0),
        reps,
        working_set_bytes: working_set,
        sgx,
    }
}

/// Times one layer with random parameters on a random input of `input_dims`.
pub fn bench_layer(label: &str, spec: LayerSpec, input_dims: &[usize], cfg: &BenchConfig, sgx: Option<SgxReference>) -> Result<BenchRow> {
    cfg.check()?;
    let (key, m, mut rng) = bench_key(cfg.seed);
    let x = random_tensor(input_dims.to_vec(), &mut rng);
    let params = spec
        .param_shapes()
        .map(|(w, b)| (random_tensor(w, &mut rng), random_tensor(b, &mut rng)));
    let sealed = seal_layer(
        spec,
        params.as_ref().map(|(w, b)| (w, b)),
        &key,
        &m,
        cfg.chunk_size,
        &mut rng,
    )?;
    let working_set = layer_working_set(&sealed, input_dims)?;
    let host_bytes = sealed.sealed.as_ref().map(SealedBlob::to_bytes);
    let mut plain = || -> Result<f32> {
        let y = spec.apply(&x, params.as_ref().map(|(w, b)| (w, b)))?;
        Ok(y.data()[0])
    };
    let mut capsule = || -> Result<f32> {
        let layer = CapsuleLayer {
            spec,
            sealed: host_bytes.as_deref().map(SealedBlob::from_bytes).transpose()?,
        };
        let y = capsule_layer_forward(&layer, &key, &m, &x, cfg.budget)?;
        Ok(y.data()[0])
    };
    let fits = working_set <= cfg.budget;
    let m = measure(cfg, fits.then_some(&mut capsule as &mut dyn FnMut() -> Result<f32>), &mut plain)?;
    Ok(row(label.to_string(), working_set, m, sgx))
}

/// Dense `n x n` layers, as in the dense-layer table.
pub fn dense_table(sizes: &[usize], cfg: &BenchConfig) -> Result<BenchReport> {
    let rows = sizes
        .iter()
        .map(|&n| {
            bench_layer(
                &format!("dense {n}x{n}"),
                LayerSpec::Dense { inputs: n, outputs: n },
                &[n],
                cfg,
                sgx_dense(n),
            )
        })
        .collect::<Result<_>>()?;
    Ok(report("Dense layer overhead", cfg, rows))
}

/// 3x3 same-padded convolutions (`c -> c` channels) followed by depthwise
/// convolutions on the same shapes, as in the convolution table.
pub fn conv_table(shapes: &[[usize; 3]], cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rows = Vec::new();
    for depthwise in [false, true] {
        for &[c, h, w] in shapes {
            let spec = if depthwise {
                LayerSpec::DepthwiseConv2d {
                    channels: c,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: Padding::Same,
                }
            } else {
                LayerSpec::Conv2d {
                    in_channels: c,
                    out_channels: c,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: Padding::Same,
                }
            };
            let kind = if depthwise { "depthwise" } else { "conv2d" };
            rows.push(bench_layer(
                &format!("{kind} {c}x{h}x{w}"),
                spec,
                &[c, h, w],
                cfg,
                sgx_conv(depthwise, [c, h, w]),
            )?);
        }
    }
    Ok(report("Convolution layer overhead (3x3 filters)", cfg, rows))
}

/// Times whole-network inference, sealed layer by layer versus plain.
pub fn bench_network(label: &str, def: &ModelDef, secrets: &ModelSecrets, cfg: &BenchConfig, sgx: Option<SgxReference>) -> Result<BenchRow> {
    cfg.check()?;
    let (key, m, mut rng) = bench_key(cfg.seed);
    let layers = seal_model_with_chunk_size(def, secrets, &key, &m, cfg.chunk_size, &mut rng)?;
    let x = random_tensor(def.input.clone(), &mut rng);
    let dims = def.activation_dims()?;
    let mut working_set = 0;
    for (layer, d) in layers.iter().zip(&dims) {
        working_set = working_set.max(layer_working_set(layer, d)?);
    }
    let host: Vec<(LayerSpec, Option<Vec<u8>>)> = layers
        .iter()
        .map(|l| (l.spec, l.sealed.as_ref().map(SealedBlob::to_bytes)))
        .collect();
    let mut plain = || -> Result<f32> { Ok(forward(def, secrets, &x)?.values()[0]) };
    let mut capsule = || -> Result<f32> {
        let mut cur = x.clone();
        for (spec, bytes) in &host {
            let layer = CapsuleLayer {
                spec: *spec,
                sealed: bytes.as_deref().map(SealedBlob::from_bytes).transpose()?,
            };
            cur = capsule_layer_forward(&layer, &key, &m, &cur, cfg.budget)?;
        }
        Ok(cur.data()[0])
    };
    let fits = working_set <= cfg.budget;
    let m = measure(cfg, fits.then_some(&mut capsule as &mut dyn FnMut() -> Result<f32>), &mut plain)?;
    Ok(row(label.to_string(), working_set, m, sgx))
}

pub fn network_table(nets: &[(String, ModelDef, ModelSecrets)], cfg: &BenchConfig) -> Result<BenchReport> {
    let rows = nets
        .iter()
        .map(|(label, def, secrets)| bench_network(label, def, secrets, cfg, sgx_network(label)))
        .collect::<Result<_>>()?;
    Ok(report("Network evaluation overhead", cfg, rows))
}

fn report(title: &str, cfg: &BenchConfig, rows: Vec<BenchRow>) -> BenchReport {
    BenchReport {
        title: title.to_string(),
        reps: cfg.reps,
        warmup: cfg.warmup,
        min_time_ms: cfg.min_time_ms,
        environment: Environment::current(cfg),
        rows,
    }
}

fn conv(cin: usize, cout: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel_h: 3,
        kernel_w: 3,
        stride,
        padding: Padding::Same,
    }
}

/// VGG-16 layer shapes on 3x224x224 inputs with 1000 classes.
pub fn vgg16_def() -> ModelDef {
    vgg16_def_at(224)
}

/// VGG-16 on `side x side` inputs; `side` must be a multiple of 32.
pub fn vgg16_def_at(side: usize) -> ModelDef {
    let cells = (side / 32) * (side / 32);
    let mut layers = Vec::new();
    let mut c = 3;
    for (n, width) in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)] {
        for _ in 0..n {
            layers.push(conv(c, width, 1));
            layers.push(LayerSpec::Relu);
            c = width;
        }
        layers.push(LayerSpec::MaxPool { size: 2 });
    }
    for (i, o) in [(512 * cells, 4096), (4096, 4096)] {
        layers.push(LayerSpec::Dense { inputs: i, outputs: o });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { inputs: 4096, outputs: 1000 });
    layers.push(LayerSpec::Softmax);
    ModelDef {
        input: vec![3, side, side],
        classes: 1000,
        layers,
    }
}

/// MobileNet layer shapes (width 1.0, 3x224x224 inputs). Batch
/// normalization is folded away and the final global average pool is
/// replaced by a 7x7 max pool, the closest available layer.
pub fn mobilenet_def() -> ModelDef {
    mobilenet_def_at(224)
}

/// MobileNet on `side x side` inputs; `side` must be a multiple of 32.
pub fn mobilenet_def_at(side: usize) -> ModelDef {
    let mut layers = vec![conv(3, 32, 2), LayerSpec::Relu];
    let blocks = [
        (32, 64, 1),
        (64, 128, 2),
        (128, 128, 1),
        (128, 256, 2),
        (256, 256, 1),
        (256, 512, 2),
        (512, 512, 1),
        (512, 512, 1),
        (512, 512, 1),
        (512, 512, 1),
        (512, 512, 1),
        (512, 1024, 2),
        (1024, 1024, 1),
    ];
    for (cin, cout, stride) in blocks {
        layers.push(LayerSpec::DepthwiseConv2d {
            channels: cin,
            kernel_h: 3,
            kernel_w: 3,
            stride,
            padding: Padding::Same,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: Padding::Valid,
        });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::MaxPool { size: side / 32 });
    layers.push(LayerSpec::Dense { inputs: 1024, outputs: 1000 });
    layers.push(LayerSpec::Softmax);
    ModelDef {
        input: vec![3, side, side],
        classes: 1000,
        layers,
    }
}

/// Small CNN on 3x32x32 inputs for quick runs.
pub fn toy_cnn_def() -> ModelDef {
    ModelDef {
        input: vec![3, 32, 32],
        classes: 10,
        layers: vec![
            conv(3, 16, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            conv(16, 32, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Dense {
                inputs: 32 * 8 * 8,
                outputs: 64,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 64, outputs: 10 },
            LayerSpec::Softmax,
        ],
    }
}

/// Built-in architecture by name: `toy-cnn`, `mobilenet` or `vgg16`.
/// The last two accept an input side (a positive multiple of 32).
pub fn builtin_def(name: &str, side: Option<usize>) -> Result<ModelDef> {
    let side = side.unwrap_or(224);
    if name != "toy-cnn" && (side == 0 || !side.is_multiple_of(32)) {
        return Err(Error::InvalidArgument(format!("input side {side} is not a positive multiple of 32")));
    }
    match name {
        "toy-cnn" => Ok(toy_cnn_def()),
        "mobilenet" => Ok(mobilenet_def_at(side)),
        "vgg16" => Ok(vgg16_def_at(side)),
        other => Err(Error::InvalidArgument(format!("unknown built-in network {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BenchConfig {
        BenchConfig {
            reps: 10,
            ..Default::default()
        }
    }

    #[test]
    fn builtin_definitions_are_valid() {
        for name in ["toy-cnn", "mobilenet", "vgg16"] {
            builtin_def(name, None).unwrap().validate().unwrap();
            builtin_def(name, Some(64)).unwrap().validate().unwrap();
        }
        assert_eq!(vgg16_def().param_count(), 138_357_544);
        let blocks = [(32, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 512)]
            .into_iter()
            .chain([(512, 512); 5])
            .chain([(512, 1024), (1024, 1024)]);
        let expected = 3 * 32 * 9 + 32 + blocks.map(|(i, o)| i * 10 + i * o + o).sum::<usize>() + 1024 * 1000 + 1000;
        assert_eq!(mobilenet_def().param_count(), expected);
        assert!(builtin_def("resnet", None).is_err());
        assert!(builtin_def("vgg16", Some(40)).is_err());
        assert!(sgx_network("vgg16@32").is_some());
    }

    #[test]
    fn dense_rows() {
        let r = dense_table(&[64, 256], &quick()).unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert_eq!(row.status, RowStatus::Ok);
            assert!(row.factor.unwrap() > 0.0 && row.factor.unwrap().is_finite());
        }
        assert_eq!(r.rows[1].sgx.unwrap().capsule_ms, 0.234);
        assert!(r.to_markdown().contains("dense 256x256"));
    }

    #[test]
    fn oversize_layer_is_reported() {
        let cfg = BenchConfig {
            reps: 1,
            budget: 1 << 20,
            ..Default::default()
        };
        let row = bench_layer("big", LayerSpec::Dense { inputs: 1024, outputs: 512 }, &[1024], &cfg, None).unwrap();
        assert_eq!(row.status, RowStatus::BudgetExceeded);
        assert!(row.capsule_mean_ms.is_none() && row.factor.is_none());
        assert!(row.working_set_bytes > 1 << 20);
    }

    #[test]
    fn network_row_and_config_checks() {
        let def = toy_cnn_def();
        let secrets = ModelSecrets::random(&def, &mut ChaCha20Rng::seed_from_u64(1));
        let r = network_table(&[("toy-cnn".into(), def, secrets)], &quick()).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].status, RowStatus::Ok);
        let bad = BenchConfig {
            warmup: 2,
            ..quick()
        };
        assert!(dense_table(&[8], &bad).is_err());
        let nan = BenchConfig {
            min_time_ms: f64::NAN,
            ..quick()
        };
        assert!(dense_table(&[8], &nan).is_err());
    }

    #[test]
    fn minimum_time_adds_repetitions() {
        let fixed = dense_table(&[64], &quick()).unwrap();
        assert_eq!(fixed.rows[0].reps, 10);
        let cfg = BenchConfig {
            min_time_ms: 20.0,
            ..quick()
        };
        let row = &dense_table(&[64], &cfg).unwrap().rows[0];
        let covered = row.reps as f64 * (row.capsule_mean_ms.unwrap() + row.plain_mean_ms);
        assert!(row.reps > 10 && covered >= 20.0, "{} reps cover {covered} ms", row.reps);
    }
}
