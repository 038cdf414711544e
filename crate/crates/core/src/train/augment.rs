//! Random rotation and rescaling of training subvolumes about their centre.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LabelVolume;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub enabled: bool,
    /// Angles are drawn from `[-max, max]` degrees independently per plane.
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Draw the foreground threshold of intensity standardisation at random.
    pub randomize_threshold: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enabled: true,
            max_rotation_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            randomize_threshold: true,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            enabled: false,
            randomize_threshold: false,
            ..Default::default()
        }
    }
}

/// One draw of the spatial transform: angles in degrees for the axial
/// (y–x), coronal (z–x) and sagittal (z–y) planes, applied in that order,
/// then an isotropic scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub angles_deg: [f64; 3],
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        angles_deg: [0.0; 3],
        scale: 1.0,
    };

    pub fn draw(config: &AugmentationConfig, rng: &mut Rng) -> Transform {
        if !config.enabled {
            return Transform::IDENTITY;
        }
        let m = config.max_rotation_deg;
        let angles_deg = [rng.uniform(-m, m), rng.uniform(-m, m), rng.uniform(-m, m)];
        let scale = rng.uniform(config.scale_min, config.scale_max);
        Transform { angles_deg, scale }
    }

    pub fn is_identity(&self) -> bool {
        self.angles_deg == [0.0; 3] && self.scale == 1.0
    }

    /// Maps an output offset from the centre to the source offset, i.e. the
    /// inverse of scale ∘ sagittal ∘ coronal ∘ axial.
    fn inverse(&self) -> [[f64; 3]; 3] {
        let rot = |plane: (usize, usize), deg: f64| {
            let (s, c) = deg.to_radians().sin_cos();
            let mut m = [[0.0; 3]; 3];
            for (i, row) in m.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            let (a, b) = plane;
            m[a][a] = c;
            m[a][b] = -s;
            m[b][a] = s;
            m[b][b] = c;
            m
        };
        let transpose = |m: [[f64; 3]; 3]| {
            let mut t = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    t[i][j] = m[j][i];
                }
            }
            t
        };
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                }
            }
            out
        };
        let [ax, cor, sag] = self.angles_deg;
        let r_ax = rot((1, 2), ax);
        let r_cor = rot((0, 2), cor);
        let r_sag = rot((0, 1), sag);
        let inv = mul(transpose(r_ax), mul(transpose(r_cor), transpose(r_sag)));
        inv.map(|row| row.map(|v| v / self.scale))
    }

    fn source_points(&self, dims: [usize; 3]) -> Vec<[f64; 3]> {
        let inv = self.inverse();
        let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let mut out = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                    let mut q = [0.0; 3];
                    for i in 0..3 {
                        let v = c[i] + inv[i][0] * d[0] + inv[i][1] * d[1] + inv[i][2] * d[2];
                        q[i] = v.clamp(0.0, dims[i] as f64 - 1.0);
                    }
                    out.push(q);
                }
            }
        }
        out
    }
}

fn trilinear(plane: &[f32], dims: [usize; 3], q: [f64; 3]) -> f32 {
    let lo = q.map(|v| v.floor() as usize);
    let hi = [0, 1, 2].map(|i| (lo[i] + 1).min(dims[i] - 1));
    let f = [0, 1, 2].map(|i| q[i] - lo[i] as f64);
    let at = |z: usize, y: usize, x: usize| plane[(z * dims[1] + y) * dims[2] + x] as f64;
    let mut acc = 0.0;
    for (wz, z) in [(1.0 - f[0], lo[0]), (f[0], hi[0])] {
        for (wy, y) in [(1.0 - f[1], lo[1]), (f[1], hi[1])] {
            for (wx, x) in [(1.0 - f[2], lo[2]), (f[2], hi[2])] {
                let w = wz * wy * wx;
                if w != 0.0 {
                    acc += w * at(z, y, x);
                }
            }
        }
    }
    acc as f32
}

/// Resamples a `(C, D, H, W)` image trilinearly (clamping at the edges).
pub fn transform_image(image: &Tensor<f32>, t: &Transform) -> Result<Tensor<f32>> {
    let dims = image.spatial()?;
    if t.is_identity() {
        return Ok(image.clone());
    }
    let pts = t.source_points(dims);
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(image.numel());
    for plane in image.data().chunks_exact(n) {
        out.extend(pts.iter().map(|&q| trilinear(plane, dims, q)));
    }
    Tensor::from_vec(image.dims().to_vec(), out)
}

/// Resamples labels by nearest neighbour (clamping at the edges).
pub fn transform_labels(labels: &LabelVolume, t: &Transform) -> Result<LabelVolume> {
    if t.is_identity() {
        return Ok(labels.clone());
    }
    let dims = labels.dims();
    let out = t
        .source_points(dims)
        .into_iter()
        .map(|q| {
            let [z, y, x] = q.map(|v| v.round() as usize);
            labels.get(z, y, x)
        })
        .collect();
    LabelVolume::new(dims, labels.num_classes(), out)
}

/// Applies one random draw of `config` to a congruent image/label pair.
pub fn augment_subvolume(
    image: &Tensor<f32>,
    labels: &LabelVolume,
    config: &AugmentationConfig,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, LabelVolume)> {
    if image.spatial()? != labels.dims() {
        return Err(Error::ShapeMismatch {
            op: "augment",
            left: image.dims().to_vec(),
            right: labels.dims().to_vec(),
        });
    }
    let t = Transform::draw(config, rng);
    Ok((transform_image(image, &t)?, transform_labels(labels, &t)?))
}
