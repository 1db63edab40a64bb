//! Browser demo for `dirlcap`.
//!
//! Three operations are exported to JavaScript, each returning a JSON string:
//!
//! * `scenePair` — a generated before/after pair with its caption, the
//!   distractor that was applied, and per-cell feature energies;
//! * `dirlExplore` — fits a small head under the channel-correlation loss
//!   alone and reports the correlation matrix before and after;
//! * `infonceExplore` — the symmetric contrastive loss of a similarity
//!   matrix with a tunable diagonal margin and temperature.
//!
//! The `*_report` functions hold the logic and are plain Rust, so they are
//! tested natively; the exported wrappers only serialize and map errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use dirlcap::ccr::{infonce_ccr, infonce_rows};
use dirlcap::encoder::{
    correlation_matrix, correlation_summary, dirl_loss, mlp_head, EncoderWeights, DEFAULT_ALPHA,
};
use dirlcap::layers::Linear;
use dirlcap::model::ParamStore;
use dirlcap::optim::Adam;
use dirlcap::scenes::{
    Cell, ChangeType, DistractorRange, FeatureGrid, GeneratorConfig, Scene, SceneGenerator,
};
use dirlcap::{Error, Graph, Result, Tensor};

/// Upper bounds that keep a single call interactive.
pub const MAX_MAGNITUDE: u32 = 3;
pub const MAX_STEPS: usize = 3000;
pub const MAX_WIDTH: usize = 16;
pub const MAX_BATCH: usize = 32;

/// One grid cell as drawn by the page.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellView {
    /// `"large red cube"`, or empty for a vacant cell.
    pub label: String,
    /// Mean absolute feature value at this cell.
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenePairReport {
    pub grid: usize,
    pub change_type: String,
    pub caption: String,
    pub shift: (i32, i32),
    pub gain: f64,
    pub noise_sigma: f64,
    /// Changed cells in feature-grid coordinates, as `[row, col]`: the
    /// union of `before_cell` and `after_cell`.
    pub change_cells: Vec<(usize, usize)>,
    /// Where the change shows in the before grid and in the (shifted) after grid.
    pub before_cell: Option<(usize, usize)>,
    pub after_cell: Option<(usize, usize)>,
    /// Row-major cells of the before scene and of the after feature grid
    /// (labels follow the shift, so they line up with the energies).
    pub before: Vec<CellView>,
    pub after: Vec<CellView>,
}

fn object_labels(scene: &Scene, shift: (i32, i32)) -> Vec<String> {
    let g = scene.grid_size();
    let mut labels = vec![String::new(); g * g];
    for row in 0..g {
        for col in 0..g {
            if let Some(o) = scene.get(Cell::new(row, col)) {
                let dst = Cell::new(row, col).shifted(shift, g);
                labels[dst.row * g + dst.col] =
                    format!("{} {} {}", o.size.word(), o.color.word(), o.shape.word());
            }
        }
    }
    labels
}

fn cell_views(labels: Vec<String>, grid: &FeatureGrid) -> Vec<CellView> {
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let cell = grid.cell(i / grid.width, i % grid.width);
            let energy = cell.iter().map(|v| f64::from(v.abs())).sum::<f64>() / cell.len() as f64;
            CellView { label, energy }
        })
        .collect()
}

/// Generates one pair on the default 6×6 grid with distractors of the given
/// magnitude (0 = none, 1 = moderate, 2 = strong, 3 = extreme).
pub fn scene_pair_report(
    seed: u64,
    change: &str,
    magnitude: u32,
    noise_sigma: f64,
) -> Result<ScenePairReport> {
    if magnitude > MAX_MAGNITUDE {
        return Err(Error::Config(format!(
            "magnitude {magnitude} exceeds {MAX_MAGNITUDE}"
        )));
    }
    let change_type: ChangeType = change.parse()?;
    let generator = SceneGenerator::new(GeneratorConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let distractor = DistractorRange::magnitude(magnitude, noise_sigma).sample(&mut rng);
    let pair = generator.generate_pair(seed, change_type, distractor)?;
    let grid = pair.before.height;
    Ok(ScenePairReport {
        grid,
        change_type: change_type.name().to_string(),
        caption: pair.caption.text(),
        shift: pair.distractor.shift,
        gain: pair.distractor.gain,
        noise_sigma: pair.distractor.noise_sigma,
        change_cells: pair.change_cells().iter().map(|c| (c.row, c.col)).collect(),
        before_cell: pair.change.before_cell.map(|c| (c.row, c.col)),
        after_cell: pair
            .change
            .after_cell
            .map(|c| c.shifted(pair.distractor.shift, grid))
            .map(|c| (c.row, c.col)),
        before: cell_views(object_labels(&pair.before_scene, (0, 0)), &pair.before),
        after: cell_views(
            object_labels(&pair.after_scene, pair.distractor.shift),
            &pair.after,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirlReport {
    pub width: usize,
    /// Row-major `width × width` cross-correlation at the first and last step.
    pub initial: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Per-step loss, mean diagonal and mean absolute off-diagonal.
    pub loss: Vec<f64>,
    pub diag_mean: Vec<f64>,
    pub offdiag_mean: Vec<f64>,
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Fits a two-layer head (or, with `mlp = false`, a single linear map) to
/// the correlation loss alone on 64 samples of `width` channels.
///
/// The before view mixes independent sources with strength `mixing`, which
/// correlates its channels; the after view is `gain` times the before view
/// plus jitter of scale `jitter`.
#[allow(clippy::too_many_arguments)]
pub fn dirl_report(
    seed: u64,
    width: usize,
    mixing: f64,
    gain: f64,
    jitter: f64,
    mlp: bool,
    steps: usize,
    learning_rate: f64,
) -> Result<DirlReport> {
    const SAMPLES: usize = 64;
    if !(2..=MAX_WIDTH).contains(&width) || steps > MAX_STEPS {
        return Err(Error::Config(format!(
            "width must be in 2..={MAX_WIDTH} and steps at most {MAX_STEPS}"
        )));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite() && gain.is_finite() && gain != 0.0) {
        return Err(Error::Config(
            "learning rate must be positive and gain non-zero".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random_tensor(&[SAMPLES, width], 1.0, &mut rng);
    let mut mix = random_tensor(&[width, width], mixing, &mut rng);
    for i in 0..width {
        mix.data_mut()[i * width + i] += 1.0;
    }
    let x_bef = {
        let mut g = Graph::new();
        let (z, m) = (g.constant(z), g.constant(mix));
        let x = g.matmul(z, m)?;
        g.value(x).clone()
    };
    let noise = random_tensor(&[SAMPLES, width], jitter, &mut rng);
    let x_aft = Tensor::new(
        vec![SAMPLES, width],
        x_bef
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, n)| gain * x + n)
            .collect(),
    )?;

    let bound = 1.0 / (width as f64).sqrt();
    let layers: &[&str] = if mlp { &["mlp1", "mlp2"] } else { &["mlp1"] };
    let mut params = ParamStore::default();
    for layer in layers {
        let w = (0..width * width)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.insert(&format!("{layer}.w"), Tensor::new(vec![width, width], w)?);
        params.insert(&format!("{layer}.b"), Tensor::zeros(vec![width]));
    }
    let mut adam = Adam::new(&params);
    let mut report = DirlReport {
        width,
        initial: Vec::new(),
        fitted: Vec::new(),
        loss: Vec::with_capacity(steps + 1),
        diag_mean: Vec::with_capacity(steps + 1),
        offdiag_mean: Vec::with_capacity(steps + 1),
    };
    for step in 0..=steps {
        let mut g = Graph::new();
        let vars: Vec<_> = params.values().iter().map(|t| g.param(t.clone())).collect();
        let (xb, xa) = (g.constant(x_bef.clone()), g.constant(x_aft.clone()));
        let (yb, ya) = if mlp {
            let head = EncoderWeights {
                proj: Linear::new(vars[0], None),
                pos: vars[0],
                mlp: Some((
                    Linear::new(vars[0], Some(vars[1])),
                    Linear::new(vars[2], Some(vars[3])),
                )),
            };
            (mlp_head(&mut g, xb, &head)?, mlp_head(&mut g, xa, &head)?)
        } else {
            let map = Linear::new(vars[0], Some(vars[1]));
            (map.forward(&mut g, xb)?, map.forward(&mut g, xa)?)
        };
        let c = correlation_matrix(&mut g, yb, ya)?;
        let loss = dirl_loss(&mut g, c, DEFAULT_ALPHA)?;
        let cv = g.value(c).clone();
        let (diag, off) = correlation_summary(&cv);
        report.loss.push(g.value(loss).data()[0]);
        report.diag_mean.push(diag);
        report.offdiag_mean.push(off);
        if step == 0 {
            report.initial = cv.data().to_vec();
        }
        if step == steps {
            report.fitted = cv.into_data();
            break;
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.grad(v).expect("parameter gradient"))
            .collect();
        adam.step(&mut params, &grads, learning_rate)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfonceReport {
    pub batch: usize,
    pub tau: f64,
    /// Row-major `batch × batch` similarities.
    pub similarity: Vec<f64>,
    /// Row-wise softmax of `S/τ` (caption → image) and of `Sᵀ/τ`.
    pub caption_to_image: Vec<f64>,
    pub image_to_caption: Vec<f64>,
    pub loss: f64,
    /// The loss of a constant similarity matrix, `ln B`.
    pub chance: f64,
}

fn row_softmax(s: &[f64], n: usize, tau: f64, transpose: bool) -> Vec<f64> {
    let at = |i: usize, j: usize| {
        if transpose {
            s[j * n + i]
        } else {
            s[i * n + j]
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let max = (0..n).map(|j| at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..n).map(|j| ((at(i, j) - max) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|x| x / z));
    }
    out
}

/// Similarities are unit Gaussian noise plus `margin` on the diagonal, so a
/// larger margin means better-aligned pairs.
pub fn infonce_report(seed: u64, batch: usize, tau: f64, margin: f64) -> Result<InfonceReport> {
    if !(1..=MAX_BATCH).contains(&batch) {
        return Err(Error::Config(format!("batch must be in 1..={MAX_BATCH}")));
    }
    if !margin.is_finite() {
        return Err(Error::Config("margin must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = random_tensor(&[batch, batch], 1.0, &mut rng);
    for i in 0..batch {
        s.data_mut()[i * batch + i] += margin;
    }
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let loss = infonce_ccr(&mut g, sv, tau)?;
    let loss = g.value(loss).data()[0];
    let data = s.into_data();
    Ok(InfonceReport {
        batch,
        tau,
        caption_to_image: row_softmax(&data, batch, tau, false),
        image_to_caption: row_softmax(&data, batch, tau, true),
        similarity: data,
        loss,
        chance: (batch as f64).ln(),
    })
}

/// One direction of the loss for an explicit row-major square matrix.
pub fn infonce_one_way(similarity: &[f64], tau: f64) -> Result<f64> {
    let n = (similarity.len() as f64).sqrt().round() as usize;
    let s = Tensor::new(vec![n, n], similarity.to_vec())?;
    let mut g = Graph::new();
    let sv = g.constant(s);
    let loss = infonce_rows(&mut g, sv, tau)?;
    Ok(g.value(loss).data()[0])
}

fn to_js<T: Serialize>(result: Result<T>) -> std::result::Result<String, JsError> {
    let value = result.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = scenePair)]
pub fn scene_pair(
    seed: u64,
    change: &str,
    magnitude: u32,
    noise_sigma: f64,
) -> std::result::Result<String, JsError> {
    to_js(scene_pair_report(seed, change, magnitude, noise_sigma))
}

#[wasm_bindgen(js_name = dirlExplore)]
#[allow(clippy::too_many_arguments)]
pub fn dirl_explore(
    seed: u64,
    width: usize,
    mixing: f64,
    gain: f64,
    jitter: f64,
    mlp: bool,
    steps: usize,
    learning_rate: f64,
) -> std::result::Result<String, JsError> {
    to_js(dirl_report(
        seed,
        width,
        mixing,
        gain,
        jitter,
        mlp,
        steps,
        learning_rate,
    ))
}

#[wasm_bindgen(js_name = infonceExplore)]
pub fn infonce_explore(
    seed: u64,
    batch: usize,
    tau: f64,
    margin: f64,
) -> std::result::Result<String, JsError> {
    to_js(infonce_report(seed, batch, tau, margin))
}
