//! Synthetic datasets with deterministic generation and stratified splits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which label column a consumer trains or evaluates against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LabelLevel {
    /// The fine-grained label every dataset carries.
    #[default]
    Label,
    /// The coarse grouping, where the dataset defines one.
    SuperLabel,
}

/// Inputs as an `n x d` matrix plus labels; hierarchical data also carries a
/// coarse label per sample.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub super_labels: Option<Vec<usize>>,
    pub classes: usize,
    pub super_classes: Option<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Labels and class count at the requested level.
    pub fn labels_at(&self, level: LabelLevel) -> Result<(&[usize], usize)> {
        match level {
            LabelLevel::Label => Ok((&self.labels, self.classes)),
            LabelLevel::SuperLabel => match (&self.super_labels, self.super_classes) {
                (Some(l), Some(c)) => Ok((l, c)),
                _ => Err(Error::DegenerateClasses {
                    detail: "dataset has no super labels".into(),
                }),
            },
        }
    }

    /// New set holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<LabeledSet> {
        let d = self.dim();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        let mut supers = self.super_labels.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape {
                    op: "select",
                    detail: format!("row {i} out of range for {} samples", self.len()),
                });
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
            if let (Some(out), Some(sl)) = (supers.as_mut(), self.super_labels.as_ref()) {
                out.push(sl[i]);
            }
        }
        Ok(LabeledSet {
            inputs: Tensor::new(vec![indices.len(), d], data)?,
            labels,
            super_labels: supers,
            classes: self.classes,
            super_classes: self.super_classes,
        })
    }
}

/// Two interleaved crescents in the plane, `n / 2` points per class.
///
/// Class 0 points are `(cos t, sin t + gap/2)` and class 1 points are
/// `(1 - cos t, -sin t - gap/2)` for `t` uniform in `[0, pi]`, each plus
/// isotropic Gaussian noise. Positive `gap` separates the moons, negative
/// overlaps them. Class 0 comes first; training shuffles anyway.
pub fn two_moons(n: usize, noise: f64, gap: f64, rng: &mut Rng) -> Result<LabeledSet> {
    if n < 4 || n % 2 != 0 {
        return Err(Error::InvalidParam {
            name: "n",
            why: format!("need an even count of at least 4, got {n}"),
        });
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidParam {
            name: "noise",
            why: format!("must be non-negative, got {noise}"),
        });
    }
    if !gap.is_finite() {
        return Err(Error::InvalidParam {
            name: "gap",
            why: format!("must be finite, got {gap}"),
        });
    }
    let half = n / 2;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2usize {
        for _ in 0..half {
            let t = rng.range_f64(0.0, core::f64::consts::PI);
            let (mut x, mut y) = if class == 0 {
                (fmath::cos(t), fmath::sin(t) + gap / 2.0)
            } else {
                (1.0 - fmath::cos(t), -fmath::sin(t) - gap / 2.0)
            };
            x += noise * rng.normal();
            y += noise * rng.normal();
            data.push(x);
            data.push(y);
            labels.push(class);
        }
    }
    Ok(LabeledSet {
        inputs: Tensor::new(vec![n, 2], data)?,
        labels,
        super_labels: None,
        classes: 2,
        super_classes: None,
    })
}

/// Gaussian mixture with two-level structure: superclass centers drawn from
/// `super_spread * N(0, I)`, subclass centers scattered around them with
/// `sub_spread`, and `per_sub` samples per subclass with `within_sd`.
/// Fine labels index subclasses globally (`super * subs_per + sub`); the
/// coarse label is the superclass.
pub fn hierarchical_gaussians(
    supers: usize,
    subs_per: usize,
    per_sub: usize,
    dim: usize,
    super_spread: f64,
    sub_spread: f64,
    within_sd: f64,
    rng: &mut Rng,
) -> Result<LabeledSet> {
    if supers < 2 {
        return Err(Error::InvalidParam {
            name: "supers",
            why: format!("need at least 2 superclasses, got {supers}"),
        });
    }
    if subs_per == 0 || per_sub == 0 || dim == 0 {
        return Err(Error::InvalidParam {
            name: "subs_per",
            why: "subclass count, samples per subclass, and dim must be positive".into(),
        });
    }
    for (name, v) in [
        ("super_spread", super_spread),
        ("within_sd", within_sd),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidParam {
                name: if name == "super_spread" { "super_spread" } else { "within_sd" },
                why: format!("must be positive, got {v}"),
            });
        }
    }
    if !(sub_spread >= 0.0) || !sub_spread.is_finite() {
        return Err(Error::InvalidParam {
            name: "sub_spread",
            why: format!("must be non-negative, got {sub_spread}"),
        });
    }

    let mut super_centers = vec![0.0; supers * dim];
    for v in &mut super_centers {
        *v = super_spread * rng.normal();
    }
    let total_subs = supers * subs_per;
    let mut sub_centers = vec![0.0; total_subs * dim];
    for s in 0..supers {
        for k in 0..subs_per {
            let idx = s * subs_per + k;
            for j in 0..dim {
                sub_centers[idx * dim + j] =
                    super_centers[s * dim + j] + sub_spread * rng.normal();
            }
        }
    }
    let n = total_subs * per_sub;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut super_labels = Vec::with_capacity(n);
    for sub in 0..total_subs {
        for _ in 0..per_sub {
            for j in 0..dim {
                data.push(sub_centers[sub * dim + j] + within_sd * rng.normal());
            }
            labels.push(sub);
            super_labels.push(sub / subs_per);
        }
    }
    Ok(LabeledSet {
        inputs: Tensor::new(vec![n, dim], data)?,
        labels,
        super_labels: Some(super_labels),
        classes: total_subs,
        super_classes: Some(supers),
    })
}

/// Split into parts of the given fractions, stratified by fine label.
///
/// Within each class the sample counts per part follow the largest-remainder
/// rule, so part sizes are exact when fractions divide evenly. Each class
/// must land at least one sample in every part; rows keep their original
/// relative order inside each part, with membership chosen by shuffle.
pub fn stratified_split(
    set: &LabeledSet,
    fractions: &[f64],
    rng: &mut Rng,
) -> Result<Vec<LabeledSet>> {
    if fractions.len() < 2 {
        return Err(Error::InvalidParam {
            name: "fractions",
            why: format!("need at least 2 parts, got {}", fractions.len()),
        });
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidParam {
            name: "fractions",
            why: format!("must be positive and sum to 1, got {fractions:?}"),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.classes];
    for (i, &l) in set.labels.iter().enumerate() {
        if l >= set.classes {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l,
                classes: set.classes,
            });
        }
        by_class[l].push(i);
    }
    let parts = fractions.len();
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); parts];
    for (class, rows) in by_class.iter().enumerate() {
        let nc = rows.len();
        let mut counts: Vec<usize> = fractions.iter().map(|f| (f * nc as f64) as usize).collect();
        let mut leftover = nc - counts.iter().sum::<usize>();
        // Largest fractional remainder takes the leftover; ties go to the
        // earlier part.
        let mut order: Vec<usize> = (0..parts).collect();
        order.sort_by(|&a, &b| {
            let ra = fractions[a] * nc as f64 - counts[a] as f64;
            let rb = fractions[b] * nc as f64 - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut k = 0;
        while leftover > 0 {
            counts[order[k % parts]] += 1;
            leftover -= 1;
            k += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::DegenerateClasses {
                detail: format!(
                    "class {class} has {nc} samples, too few to appear in every split part"
                ),
            });
        }
        let mut pool: Vec<usize> = rows.clone();
        rng.shuffle(&mut pool);
        let mut start = 0;
        for (p, &c) in counts.iter().enumerate() {
            let mut chunk: Vec<usize> = pool[start..start + c].to_vec();
            chunk.sort_unstable();
            assigned[p].extend(chunk);
            start += c;
        }
    }
    let mut out = Vec::with_capacity(parts);
    for mut rows in assigned {
        rows.sort_unstable();
        out.push(set.select(&rows)?);
    }
    Ok(out)
}

/// Two-way stratified split; returns `(rest, held_out)` where `held_out`
/// gets `fraction` of each class.
pub fn train_test_split(
    set: &LabeledSet,
    fraction: f64,
    rng: &mut Rng,
) -> Result<(LabeledSet, LabeledSet)> {
    let mut parts = stratified_split(set, &[1.0 - fraction, fraction], rng)?;
    let test = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, test))
}
