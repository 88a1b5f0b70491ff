//! Synthetic CT/PET-like phantom pairs and random affine transforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::affine::AffineParams;
use crate::error::{Error, Result};
use crate::pyramid::gaussian_blur;
use crate::volume::Volume;

const PLACEMENT_ATTEMPTS: usize = 2000;
/// Body ellipsoid semi-axes as a fraction of each extent.
const BODY_RADIUS: f64 = 0.44;
/// Blob semi-axis range as a fraction of the smallest extent.
const RADIUS_RANGE: (f64, f64) = (0.1, 0.17);
/// Blob centers stay this many largest blob semi-axes inside the body surface.
const BODY_MARGIN: f64 = 0.4;
/// Minimum gap between blob bounding spheres, fraction of the smallest extent.
const BLOB_GAP: f64 = 0.01;
/// Soft-tissue CT level and the amplitude of its linear ramp.
const CT_TISSUE: (f64, f64) = (0.03, 0.05);
const PET_TISSUE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    pub n_blobs: usize,
    pub noise_sigma: f64,
    /// PET-channel smoothing in voxels.
    pub blur_sigma_pet: f64,
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], seed: u64) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            seed,
            n_blobs: 6,
            noise_sigma: 0.02,
            blur_sigma_pet: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::invalid(format!("phantom dims must be at least 16, got {:?}", self.dims)));
        }
        if self.n_blobs == 0 {
            return Err(Error::invalid("phantom needs at least one blob"));
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma_pet >= 0.0) {
            return Err(Error::invalid("noise and blur must be non-negative"));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("spacing must be positive"));
        }
        Ok(())
    }
}

/// A generated phantom: two modalities on the same grid and the blob labels.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub ct_like: Volume,
    pub pet_like: Volume,
    /// Integer blob ids, 0 for background.
    pub labels: Volume,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Conservative separation test on the bounding spheres, in millimeters.
    fn clear_of(&self, o: &Ellipsoid, gap: f64) -> bool {
        let d = (0..3).map(|a| (self.center[a] - o.center[a]).powi(2)).sum::<f64>().sqrt();
        let r = |e: &Ellipsoid| e.radii.iter().cloned().fold(0.0, f64::max);
        d >= r(self) + r(o) + gap
    }
}

/// PET level of the CT class with the given rank (0 darkest). Levels run
/// against the CT ordering with neighbouring pairs swapped, so the mapping is
/// neither monotone nor close to linear.
fn remap_level(rank: usize, n: usize) -> f64 {
    let (lo, hi) = (0.05, 0.95);
    if n == 1 {
        return hi;
    }
    let j = n - 1 - rank;
    let j = if (j ^ 1) < n { j ^ 1 } else { j };
    lo + (hi - lo) * j as f64 / (n - 1) as f64
}

/// Generates an ellipsoidal body in air holding `n_blobs` labelled
/// ellipsoids, in two contrasts. Air is 0 in both channels. The PET-like
/// channel is a non-monotonic class-wise remap of the CT-like one, then
/// blurred, corrupted by Gaussian noise and clipped to `[0, 1]`.
pub fn make_phantom_pair(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [nx, ny, nz] = spec.dims;
    let extent: [f64; 3] = std::array::from_fn(|a| spec.dims[a] as f64 * spec.spacing[a]);
    let min_extent = extent.iter().cloned().fold(f64::INFINITY, f64::min);

    let body = Ellipsoid {
        center: std::array::from_fn(|a| 0.5 * extent[a]),
        radii: std::array::from_fn(|a| BODY_RADIUS * extent[a]),
    };
    let mut blobs: Vec<Ellipsoid> = Vec::with_capacity(spec.n_blobs);
    for b in 0..spec.n_blobs {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1) * min_extent);
            let rmax = radii.iter().cloned().fold(0.0, f64::max);
            let room: [f64; 3] = std::array::from_fn(|a| (body.radii[a] - BODY_MARGIN * rmax).max(0.0));
            let center: [f64; 3] =
                std::array::from_fn(|a| body.center[a] + rng.random_range(-1.0..1.0) * room[a]);
            let inside = (0..3).map(|a| ((center[a] - body.center[a]) / room[a].max(1e-12)).powi(2)).sum::<f64>() <= 1.0;
            let e = Ellipsoid { center, radii };
            if inside && blobs.iter().all(|o| e.clear_of(o, BLOB_GAP * min_extent)) {
                blobs.push(e);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place blob {} of {} after {PLACEMENT_ATTEMPTS} attempts",
                b + 1,
                spec.n_blobs
            )));
        }
    }

    // CT levels: evenly spaced in [0.25, 0.95], shuffled over blobs
    let n = spec.n_blobs;
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    let ct_level = |r: usize| if n == 1 { 0.6 } else { 0.25 + 0.7 * r as f64 / (n - 1) as f64 };
    let gradient_dir = rng.random_range(0..3usize);

    let len = nx * ny * nz;
    let mut labels = vec![0.0; len];
    let mut ct = vec![0.0; len];
    let mut pet = vec![0.0; len];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let ijk = [i, j, k];
                let p: [f64; 3] = std::array::from_fn(|a| (ijk[a] as f64 + 0.5) * spec.spacing[a]);
                match blobs.iter().position(|e| e.contains(p)) {
                    Some(b) => {
                        // rank n-1 is the brightest CT class
                        let r = ranks[b];
                        labels[idx] = (b + 1) as f64;
                        ct[idx] = ct_level(r);
                        pet[idx] = remap_level(r, n);
                    }
                    None if body.contains(p) => {
                        ct[idx] = CT_TISSUE.0 + CT_TISSUE.1 * p[gradient_dir] / extent[gradient_dir];
                        pet[idx] = PET_TISSUE;
                    }
                    None => {}
                }
            }
        }
    }

    let ct_like = Volume::new(spec.dims, spec.spacing, ct)?;
    let mut pet_like = Volume::new(spec.dims, spec.spacing, pet)?;
    if spec.blur_sigma_pet > 0.0 {
        pet_like = gaussian_blur(&pet_like, [spec.blur_sigma_pet; 3])?;
    }
    let mut pet_data = pet_like.into_data();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;
        for v in pet_data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in pet_data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Phantom {
        pet_like: ct_like.with_data(pet_data)?,
        labels: ct_like.with_data(labels)?,
        ct_like,
    })
}

/// Seed of the random transform paired with phantom `seed`.
pub fn transform_seed(seed: u64) -> u64 {
    seed.wrapping_add(1000)
}

/// Bounds of the random transform distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformRanges {
    /// Radians per axis.
    pub max_rot: f64,
    /// Translation bound per axis as a fraction of the largest extent.
    pub max_trans: f64,
    pub scale_range: [f64; 2],
    pub max_shear: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            max_rot: 15f64.to_radians(),
            max_trans: 0.1,
            scale_range: [0.9, 1.1],
            max_shear: 0.1,
        }
    }
}

impl TransformRanges {
    pub fn zero() -> Self {
        Self {
            max_rot: 0.0,
            max_trans: 0.0,
            scale_range: [1.0, 1.0],
            max_shear: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        let finite = [self.max_rot, self.max_trans, self.max_shear, lo, hi].iter().all(|v| v.is_finite());
        if !finite || self.max_rot < 0.0 || self.max_trans < 0.0 || self.max_shear < 0.0 {
            return Err(Error::invalid("transform ranges must be finite and non-negative"));
        }
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(Error::invalid(format!(
                "scale range must satisfy 0 < lo <= 1 <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Draws each parameter uniformly within `ranges`. Translations are in
/// normalized units, where the largest extent spans 2.
pub fn random_affine(ranges: &TransformRanges, seed: u64) -> Result<AffineParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sym = |bound: f64| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
    let t = 2.0 * ranges.max_trans;
    let translation = [sym(t), sym(t), sym(t)];
    let rotation = [sym(ranges.max_rot), sym(ranges.max_rot), sym(ranges.max_rot)];
    let shear = [sym(ranges.max_shear), sym(ranges.max_shear), sym(ranges.max_shear)];
    let [lo, hi] = ranges.scale_range;
    let scale = std::array::from_fn(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo });
    Ok(AffineParams {
        translation,
        rotation,
        scale,
        shear,
    })
}

/// Pearson correlation coefficient of two equally long samples.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::discrete_cr_oracle;
    use std::collections::BTreeMap;

    #[test]
    fn remap_matches_reference_levels() {
        let got: Vec<f64> = (0..6).map(|r| remap_level(r, 6)).collect();
        let want = [0.77, 0.95, 0.41, 0.59, 0.05, 0.23];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec::new([20, 18, 16], 9);
        let a = make_phantom_pair(&spec).unwrap();
        let b = make_phantom_pair(&spec).unwrap();
        assert_eq!(a.ct_like.data(), b.ct_like.data());
        assert_eq!(a.pet_like.data(), b.pet_like.data());
        assert_eq!(a.labels.data(), b.labels.data());
    }

    #[test]
    fn noiseless_unblurred_pet_is_a_classwise_remap() {
        let mut spec = PhantomSpec::new([24, 24, 24], 4);
        spec.noise_sigma = 0.0;
        spec.blur_sigma_pet = 0.0;
        let p = make_phantom_pair(&spec).unwrap();
        let mut map: BTreeMap<i64, f64> = BTreeMap::new();
        for ((l, c), v) in p.labels.data().iter().zip(p.ct_like.data()).zip(p.pet_like.data()) {
            if *l == 0.0 {
                if *c == 0.0 {
                    assert_eq!(*v, 0.0);
                } else {
                    assert_eq!(*v, PET_TISSUE);
                    assert!((CT_TISSUE.0..=CT_TISSUE.0 + CT_TISSUE.1).contains(c));
                }
            } else {
                let e = map.entry(*l as i64).or_insert(*v);
                assert_eq!(*e, *v);
            }
        }
        assert_eq!(map.len(), 6);
    }

    #[test]
    fn default_phantom_is_functional_but_uncorrelated() {
        for seed in 0..5 {
            let p = make_phantom_pair(&PhantomSpec::new([48, 48, 48], seed)).unwrap();
            let eta = discrete_cr_oracle(p.ct_like.data(), p.pet_like.data(), 64).unwrap();
            let r = pearson(p.ct_like.data(), p.pet_like.data());
            assert!(eta > 0.8, "seed {seed}: eta {eta}");
            assert!(r.abs() < 0.5, "seed {seed}: pearson {r}");
        }
    }

    #[test]
    fn random_affine_respects_ranges() {
        assert_eq!(random_affine(&TransformRanges::zero(), 3).unwrap(), AffineParams::identity());
        let r = TransformRanges::default();
        assert_eq!(random_affine(&r, 11).unwrap(), random_affine(&r, 11).unwrap());
        for seed in 0..1000 {
            let p = random_affine(&r, seed).unwrap();
            for a in 0..3 {
                assert!(p.rotation[a].abs() <= r.max_rot);
                assert!(p.translation[a].abs() <= 2.0 * r.max_trans);
                assert!(p.shear[a].abs() <= r.max_shear);
                assert!(p.scale[a] >= r.scale_range[0] && p.scale[a] <= r.scale_range[1]);
            }
        }
    }

    #[test]
    fn impossible_packing_fails() {
        let mut spec = PhantomSpec::new([16, 16, 16], 1);
        spec.n_blobs = 60;
        assert!(matches!(make_phantom_pair(&spec), Err(Error::Generation(_))));
    }
}
