//! Frozen procedural generator: a mapping network `z -> w`, a scene
//! renderer `w -> image` and the analytic attribute oracle.

use std::f64::consts::PI;

use ndtensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envelope::{hash_arrays, Record};
use crate::image::ImageGrid;
use crate::nn::stack_rows;
use crate::{Error, Result};

/// Number of scene parameters driving the renderer.
pub const PARAM_COUNT: usize = 8;

/// Scene parameter slots.
pub mod param {
    pub const CENTER_X: usize = 0;
    pub const CENTER_Y: usize = 1;
    pub const RADIUS: usize = 2;
    pub const ELONGATION: usize = 3;
    pub const INTENSITY: usize = 4;
    pub const BACKGROUND: usize = 5;
    pub const STRIPE_AMPLITUDE: usize = 6;
    pub const STRIPE_FREQUENCY: usize = 7;
}

pub const ATTRIBUTE_NAMES: [&str; 4] = ["big-blob", "striped", "bright-background", "elongated"];
/// Scene parameter thresholded by each attribute.
pub const ATTRIBUTE_PARAMS: [usize; 4] = [
    param::RADIUS,
    param::STRIPE_AMPLITUDE,
    param::BACKGROUND,
    param::ELONGATION,
];

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_STYLE_DIM: usize = 64;
pub const DEFAULT_IMAGE_SIZE: usize = 32;
/// Thresholds calibrated for the default seed and dimension.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [
    0.6190833033616255,
    0.6486406453165703,
    0.49995538505078285,
    0.40111120023954194,
];

/// Seed and sample count used by [`GeneratorSpec::calibrate`].
pub const CALIBRATION_SEED: u64 = 0xCA11_B8A7;
pub const CALIBRATION_SAMPLES: usize = 10_000;

const INTENSITY_OFFSET: f64 = 1.5;
const CLAMP_GAIN: f64 = 6.0;

/// Everything needed to regenerate a generator bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub style_dim: usize,
    pub height: usize,
    pub width: usize,
    pub thresholds: Vec<f64>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            style_dim: DEFAULT_STYLE_DIM,
            height: DEFAULT_IMAGE_SIZE,
            width: DEFAULT_IMAGE_SIZE,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl GeneratorSpec {
    /// Spec with thresholds set to the per-attribute medians over
    /// [`CALIBRATION_SAMPLES`] mapped samples.
    pub fn calibrate(seed: u64, style_dim: usize, height: usize, width: usize) -> Result<Self> {
        let mut spec = Self {
            seed,
            style_dim,
            height,
            width,
            thresholds: vec![0.5; ATTRIBUTE_NAMES.len()],
        };
        let gen = Generator::new(spec.clone())?;
        let z = gen.sample_z(CALIBRATION_SAMPLES, CALIBRATION_SEED)?;
        let w = gen.map_rows(&z)?;
        let p = gen.scene_rows(&w)?;
        for (k, &j) in ATTRIBUTE_PARAMS.iter().enumerate() {
            let mut col: Vec<f64> = p.data().chunks(PARAM_COUNT).map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            let n = col.len();
            spec.thresholds[k] = 0.5 * (col[n / 2 - 1] + col[n / 2]);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.style_dim == 0 || self.style_dim > 512 {
            return Err(Error::Config(format!(
                "style_dim must be in 1..=512, got {}",
                self.style_dim
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "images must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.thresholds.len() != ATTRIBUTE_NAMES.len() {
            return Err(Error::Config(format!(
                "expected {} thresholds, got {}",
                ATTRIBUTE_NAMES.len(),
                self.thresholds.len()
            )));
        }
        if self.thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::Config("thresholds must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Frozen generator weights derived from a [`GeneratorSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    /// Mapping network, stored transposed for `rows · W`.
    map_w1: Tensor,
    map_b1: Tensor,
    map_w2: Tensor,
    map_b2: Tensor,
    /// Scene mixing, also transposed: `[D, P]` and `[P, P]`.
    mix_w1: Tensor,
    mix_w2: Tensor,
    mix_bias: Tensor,
    grid_x: Vec<f64>,
    grid_y: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            std * v
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape, data).expect("positive shape")
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.style_dim;
        let p = PARAM_COUNT;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let inv = 1.0 / (d as f64).sqrt();
        let map_w1 = gaussian(&mut rng, &[d, d], inv);
        let map_b1 = gaussian(&mut rng, &[d], 0.1);
        let map_w2 = gaussian(&mut rng, &[d, d], inv);
        let map_b2 = gaussian(&mut rng, &[d], 0.1);
        let mix_w1 = gaussian(&mut rng, &[d, p], 2.0 * inv);
        let mix_w2 = gaussian(&mut rng, &[p, p], 2.0 / (p as f64).sqrt());
        let mut bias = vec![0.0; p];
        bias[param::INTENSITY] = INTENSITY_OFFSET;
        let (h, w) = (spec.height, spec.width);
        let mut grid_x = Vec::with_capacity(h * w);
        let mut grid_y = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                grid_x.push((x as f64 + 0.5) / w as f64);
                grid_y.push((y as f64 + 0.5) / h as f64);
            }
        }
        Ok(Self {
            spec,
            map_w1,
            map_b1,
            map_w2,
            map_b2,
            mix_w1,
            mix_w2,
            mix_bias: Tensor::vector(bias),
            grid_x,
            grid_y,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn style_dim(&self) -> usize {
        self.spec.style_dim
    }

    pub fn attrs(&self) -> usize {
        ATTRIBUTE_NAMES.len()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (1, self.spec.height, self.spec.width)
    }

    pub fn pixels(&self) -> usize {
        self.spec.height * self.spec.width
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.spec.thresholds
    }

    /// SHA-256 over every frozen weight.
    pub fn weights_hash(&self) -> String {
        hash_arrays(self.weights().iter().map(|t| t.data()))
    }

    fn weights(&self) -> [&Tensor; 7] {
        [
            &self.map_w1,
            &self.map_b1,
            &self.map_w2,
            &self.map_b2,
            &self.mix_w1,
            &self.mix_w2,
            &self.mix_bias,
        ]
    }

    fn check_rows(&self, what: &'static str, rows: &Tensor) -> Result<usize> {
        match rows.shape() {
            [n, d] if *d == self.style_dim() => Ok(*n),
            other => Err(Error::ShapeMismatch {
                what,
                expected: vec![self.style_dim()],
                got: other.to_vec(),
            }),
        }
    }

    fn check_vec(&self, what: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.style_dim() {
            return Err(Error::ShapeMismatch {
                what,
                expected: vec![self.style_dim()],
                got: vec![v.len()],
            });
        }
        Ok(())
    }

    /// `n` standard-normal latents, row-major `[n, D]`.
    pub fn sample_z(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample_z needs n > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(gaussian(&mut rng, &[n, self.style_dim()], 1.0))
    }

    /// Mapping network on the tape: `[batch, D] -> [batch, D]`.
    pub fn map_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let w1 = tape.constant(self.map_w1.clone());
        let b1 = tape.constant(self.map_b1.clone());
        let w2 = tape.constant(self.map_w2.clone());
        let b2 = tape.constant(self.map_b2.clone());
        let h = tape.matmul(z, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h);
        let h = tape.matmul(h, w2)?;
        Ok(tape.add(h, b2)?)
    }

    /// Scene parameters on the tape: `[batch, D] -> [batch, P]`.
    pub fn scene_on_tape(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        let w1 = tape.constant(self.mix_w1.clone());
        let w2 = tape.constant(self.mix_w2.clone());
        let bias = tape.constant(self.mix_bias.clone());
        let h = tape.matmul(w, w1)?;
        let h = tape.tanh(h);
        let a = tape.matmul(h, w2)?;
        let a = tape.add(a, bias)?;
        Ok(tape.sigmoid(a))
    }

    /// Renders scene parameters `[batch, P]` to images `[batch, H*W]`.
    pub fn render_params_on_tape(&self, tape: &mut Tape, p: Var) -> Result<Var> {
        let batch = tape.shape(p)[0];
        let hw = self.pixels();
        let tile = |g: &[f64]| Tensor::matrix(batch, hw, g.repeat(batch));
        let gx = tape.constant(tile(&self.grid_x)?);
        let gy = tape.constant(tile(&self.grid_y)?);
        let col = |tape: &mut Tape, j: usize| tape.slice_cols(p, j, j + 1);
        let affine = |tape: &mut Tape, v: Var, a: f64, b: f64| {
            let s = tape.scale(v, a);
            tape.add_scalar(s, b)
        };

        let px = col(tape, param::CENTER_X)?;
        let cx = affine(tape, px, 0.4, 0.3);
        let py = col(tape, param::CENTER_Y)?;
        let cy = affine(tape, py, 0.4, 0.3);
        let pr = col(tape, param::RADIUS)?;
        let r = affine(tape, pr, 0.14, 0.08);
        let e = col(tape, param::ELONGATION)?;
        let ex = tape.add_scalar(e, 1.0);
        let sx = tape.mul(r, ex)?;
        let ey = affine(tape, e, -0.5, 1.0);
        let sy = tape.mul(r, ey)?;

        // Anisotropic Gaussian blob.
        let dx = tape.sub(gx, cx)?;
        let dx2 = tape.square(dx);
        let sx2 = tape.square(sx);
        let isx2 = tape.recip(sx2);
        let qx = tape.mul(dx2, isx2)?;
        let dy = tape.sub(gy, cy)?;
        let dy2 = tape.square(dy);
        let sy2 = tape.square(sy);
        let isy2 = tape.recip(sy2);
        let qy = tape.mul(dy2, isy2)?;
        let q = tape.add(qx, qy)?;
        let q = tape.scale(q, -0.5);
        let blob = tape.exp(q);
        let pi = col(tape, param::INTENSITY)?;
        let amp = tape.scale(pi, 0.65);
        let blob = tape.mul(blob, amp)?;

        // Vertical stripes.
        let pf = col(tape, param::STRIPE_FREQUENCY)?;
        let freq = affine(tape, pf, 4.0, 2.0);
        let phase = tape.mul(gx, freq)?;
        let phase = tape.scale(phase, 2.0 * PI);
        let stripes = tape.sin(phase);
        let pa = col(tape, param::STRIPE_AMPLITUDE)?;
        let sa = tape.scale(pa, 0.3);
        let stripes = tape.mul(stripes, sa)?;

        let pb = col(tape, param::BACKGROUND)?;
        let level = affine(tape, pb, 0.4, 0.05);
        let raw = tape.add(stripes, level)?;
        let raw = tape.add(raw, blob)?;
        // Soft clamp to (0, 1).
        let centered = tape.add_scalar(raw, -0.5);
        let scaled = tape.scale(centered, CLAMP_GAIN);
        Ok(tape.sigmoid(scaled))
    }

    /// Synthesis network on the tape: `[batch, D] -> [batch, H*W]`.
    pub fn render_on_tape(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        let p = self.scene_on_tape(tape, w)?;
        self.render_params_on_tape(tape, p)
    }

    fn eval(&self, rows: &Tensor, f: impl FnOnce(&Self, &mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(rows.clone());
        let y = f(self, &mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn map_rows(&self, z: &Tensor) -> Result<Tensor> {
        self.check_rows("latent batch", z)?;
        self.eval(z, Self::map_on_tape)
    }

    pub fn scene_rows(&self, w: &Tensor) -> Result<Tensor> {
        self.check_rows("style batch", w)?;
        self.eval(w, Self::scene_on_tape)
    }

    /// Images for each row of `w: [batch, D]` as `[batch, H*W]`.
    pub fn render_rows(&self, w: &Tensor) -> Result<Tensor> {
        self.check_rows("style batch", w)?;
        self.eval(w, Self::render_on_tape)
    }

    pub fn map(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_vec("latent", z)?;
        Ok(self.map_rows(&stack_rows(&[z])?)?.into_data())
    }

    pub fn scene_params(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_vec("style vector", w)?;
        Ok(self.scene_rows(&stack_rows(&[w])?)?.into_data())
    }

    pub fn synthesize(&self, w: &[f64]) -> Result<ImageGrid> {
        self.check_vec("style vector", w)?;
        let data = self.render_rows(&stack_rows(&[w])?)?.into_data();
        ImageGrid::new(1, self.spec.height, self.spec.width, data)
    }

    /// Renders explicit scene parameters, bypassing the style vector.
    pub fn render_params(&self, p: &[f64]) -> Result<ImageGrid> {
        if p.len() != PARAM_COUNT {
            return Err(Error::ShapeMismatch {
                what: "scene parameters",
                expected: vec![PARAM_COUNT],
                got: vec![p.len()],
            });
        }
        let rows = Tensor::matrix(1, PARAM_COUNT, p.to_vec())?;
        let data = self.eval(&rows, Self::render_params_on_tape)?.into_data();
        ImageGrid::new(1, self.spec.height, self.spec.width, data)
    }

    /// Labels from scene parameters.
    pub fn labels_from_params(&self, p: &[f64]) -> Vec<u8> {
        ATTRIBUTE_PARAMS
            .iter()
            .zip(&self.spec.thresholds)
            .map(|(&j, &t)| u8::from(p[j] > t))
            .collect()
    }

    pub fn oracle_labels(&self, w: &[f64]) -> Result<Vec<u8>> {
        Ok(self.labels_from_params(&self.scene_params(w)?))
    }

    /// Labels for each row of `w: [batch, D]`.
    pub fn oracle_labels_rows(&self, w: &Tensor) -> Result<Vec<Vec<u8>>> {
        let p = self.scene_rows(w)?;
        Ok(p.data().chunks(PARAM_COUNT).map(|r| self.labels_from_params(r)).collect())
    }

    /// `n` records `(w, oracle_labels(w))` with `w = map(z)`.
    pub fn make_dataset(&self, n: usize, seed: u64) -> Result<Vec<Record>> {
        let z = self.sample_z(n, seed)?;
        let w = self.map_rows(&z)?;
        let labels = self.oracle_labels_rows(&w)?;
        Ok(w
            .data()
            .chunks(self.style_dim())
            .zip(labels)
            .map(|(w, labels)| Record { w: w.to_vec(), labels })
            .collect())
    }

    /// Mean of `n` mapped samples.
    pub fn mean_style(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        let z = self.sample_z(n, seed)?;
        let w = self.map_rows(&z)?;
        let d = self.style_dim();
        let mut mean = vec![0.0; d];
        for row in w.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Ok(mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Generator {
        Generator::new(GeneratorSpec {
            seed: 3,
            style_dim: 16,
            height: 16,
            width: 16,
            thresholds: vec![0.5; 4],
        })
        .unwrap()
    }

    #[test]
    fn regeneration_is_bit_exact() {
        let a = small();
        let b = small();
        assert_eq!(a, b);
        assert_eq!(a.weights_hash(), b.weights_hash());
    }

    #[test]
    fn pixels_and_params_stay_in_range() {
        let gen = small();
        let z = gen.sample_z(20, 5).unwrap();
        let w = gen.map_rows(&z).unwrap();
        assert!(gen.scene_rows(&w).unwrap().data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(gen.render_rows(&w).unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let gen = small();
        assert!(gen.map(&[0.0; 17]).is_err());
        assert!(gen.map(&[0.0; 16]).is_ok());
        assert!(gen.synthesize(&[0.0; 3]).is_err());
        assert!(gen.sample_z(0, 1).is_err());
    }

    #[test]
    fn oracle_thresholds() {
        let gen = small();
        let mut p = vec![0.5; PARAM_COUNT];
        for (k, &j) in ATTRIBUTE_PARAMS.iter().enumerate() {
            p[j] = gen.thresholds()[k] + 0.3;
            assert_eq!(gen.labels_from_params(&p)[k], 1);
            p[j] = gen.thresholds()[k] - 0.3;
            assert_eq!(gen.labels_from_params(&p)[k], 0);
        }
    }

    #[test]
    fn dataset_matches_oracle() {
        let gen = small();
        for rec in gen.make_dataset(30, 2).unwrap() {
            assert_eq!(gen.oracle_labels(&rec.w).unwrap(), rec.labels);
        }
    }
}
