use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Item, Role};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const BLOBS_PER_CLASS: usize = 3;

/// Gaussian-cluster image generator.
///
/// Each class gets a smooth prototype (a sum of a few random Gaussian blobs);
/// samples are the prototype plus i.i.d. pixel noise of standard deviation
/// `sigma`. Text form is one `key=value` per line, `#` starts a comment:
///
/// ```text
/// classes=10
/// per_class=100
/// height=16
/// width=16
/// channels=1
/// sigma=0.8
/// seed=7
/// test_per_class=20
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub name: String,
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Size of an optional separately generated test split.
    pub test_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            classes: 10,
            per_class: 100,
            height: 16,
            width: 16,
            channels: 1,
            sigma: 0.8,
            seed: 7,
            test_per_class: 0,
        }
    }
}

impl std::str::FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |_| Error::Config(format!("line {}: bad value for {k}: {v:?}", lineno + 1));
            match k {
                "name" => spec.name = v.to_string(),
                "classes" => spec.classes = v.parse().map_err(bad)?,
                "per_class" => spec.per_class = v.parse().map_err(bad)?,
                "height" => spec.height = v.parse().map_err(bad)?,
                "width" => spec.width = v.parse().map_err(bad)?,
                "channels" => spec.channels = v.parse().map_err(bad)?,
                "seed" => spec.seed = v.parse().map_err(bad)?,
                "test_per_class" => spec.test_per_class = v.parse().map_err(bad)?,
                "sigma" => {
                    spec.sigma = v
                        .parse()
                        .map_err(|_| Error::Config(format!("line {}: bad value for sigma: {v:?}", lineno + 1)))?
                }
                _ => return Err(Error::Config(format!("line {}: unknown key {k:?}", lineno + 1))),
            }
        }
        Ok(spec)
    }
}

impl std::fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "name={}", self.name)?;
        writeln!(f, "classes={}", self.classes)?;
        writeln!(f, "per_class={}", self.per_class)?;
        writeln!(f, "height={}", self.height)?;
        writeln!(f, "width={}", self.width)?;
        writeln!(f, "channels={}", self.channels)?;
        writeln!(f, "sigma={}", self.sigma)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "test_per_class={}", self.test_per_class)
    }
}

impl SyntheticSpec {
    /// Generates the training split and, when `test_per_class > 0`, a test split
    /// drawn from the same class prototypes.
    pub fn generate<T: Scalar>(&self) -> Result<(Dataset<T>, Option<Dataset<T>>)> {
        if self.classes == 0 || self.per_class == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic spec extents must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("bad sigma {}", self.sigma)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let protos: Vec<Vec<f64>> = (0..self.classes).map(|_| self.prototype(&mut rng)).collect();
        let train = self.sample_split(&mut rng, &protos, self.per_class, &self.name)?;
        let test = if self.test_per_class > 0 {
            Some(self.sample_split(&mut rng, &protos, self.test_per_class, &format!("{}-test", self.name))?)
        } else {
            None
        };
        Ok((train, test))
    }

    fn prototype(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (h, w, c) = (self.height as f64, self.width as f64, self.channels);
        let mut img = vec![0.0; c * self.height * self.width];
        for _ in 0..BLOBS_PER_CLASS {
            let cy = rng.gen_range(0.0..h);
            let cx = rng.gen_range(0.0..w);
            let s = rng.gen_range(0.1..0.25) * h.min(w);
            let amps: Vec<f64> = (0..c)
                .map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            for (ch, amp) in amps.iter().enumerate() {
                for y in 0..self.height {
                    for x in 0..self.width {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[(ch * self.height + y) * self.width + x] += amp * (-d2 / (2.0 * s * s)).exp();
                    }
                }
            }
        }
        img
    }

    fn sample_split<T: Scalar>(
        &self,
        rng: &mut ChaCha8Rng,
        protos: &[Vec<f64>],
        per_class: usize,
        name: &str,
    ) -> Result<Dataset<T>> {
        let shape = vec![self.channels, self.height, self.width];
        let mut items = Vec::with_capacity(per_class * self.classes);
        for _ in 0..per_class {
            for (label, proto) in protos.iter().enumerate() {
                let data = proto
                    .iter()
                    .map(|&p| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::lit(p + self.sigma * z)
                    })
                    .collect();
                items.push(Item {
                    image: Tensor::new(shape.clone(), data)?,
                    label: Some(label),
                });
            }
        }
        Dataset::new(name, items, Some(self.classes), Role::Both)
    }
}
