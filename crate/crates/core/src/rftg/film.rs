use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numcore::{Bound, Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::synthgen::Gender;

/// Normalized age plus one-hot gender.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicVector {
    pub age_norm: f64,
    pub gender_male: f64,
    pub gender_female: f64,
}

impl DemographicVector {
    pub fn to_array(self) -> [f64; 3] {
        [self.age_norm, self.gender_male, self.gender_female]
    }
}

pub fn demographic_vector(age_years: f64, gender: Gender, age_mean: f64, age_std: f64) -> Result<DemographicVector> {
    if !(age_std > 0.0) {
        return Err(Error::invalid("demographic_vector", format!("age_std must be positive, got {age_std}")));
    }
    let (m, f) = match gender {
        Gender::Male => (1.0, 0.0),
        Gender::Female => (0.0, 1.0),
    };
    Ok(DemographicVector {
        age_norm: (age_years - age_mean) / age_std,
        gender_male: m,
        gender_female: f,
    })
}

/// Mean and population standard deviation of training-split ages.
pub fn age_stats(ages: &[f64]) -> Result<(f64, f64)> {
    if ages.is_empty() {
        return Err(Error::invalid("age_stats", "no ages"));
    }
    let n = ages.len() as f64;
    let mean = ages.iter().sum::<f64>() / n;
    let sd = (ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(Error::invalid("age_stats", "all training ages are equal"));
    }
    Ok((mean, sd))
}

pub const FILM_HIDDEN: usize = 16;

/// Two-layer perceptron `d → (γ, β)` for feature-wise modulation of width
/// `width`. The output layer starts at zero weight with bias `[1; 0]`, so a
/// fresh layer is the identity.
#[derive(Clone, Copy, Debug)]
pub struct FilmLayer {
    pub hidden: Linear,
    pub out: Linear,
    pub width: usize,
}

impl FilmLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize) -> Self {
        let hidden = Linear::new(store, rng, &format!("{name}.hidden"), ParamGroup::Head, 3, FILM_HIDDEN, true);
        let w = store.add(format!("{name}.out.weight"), ParamGroup::Head, Tensor::zeros(&[FILM_HIDDEN, 2 * width]));
        let bias: Vec<f64> = (0..2 * width).map(|i| if i < width { 1.0 } else { 0.0 }).collect();
        let b = store.add(format!("{name}.out.bias"), ParamGroup::Head, Tensor::from_vec(bias));
        let out = Linear {
            w,
            b: Some(b),
            fan_in: FILM_HIDDEN,
            fan_out: 2 * width,
        };
        Self { hidden, out, width }
    }

    /// `(γ, β)`, each `[B, width]`, for demographics `d: [B, 3]`.
    pub fn coefficients(&self, g: &mut Graph, p: &Bound, d: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, p, d)?;
        let h = g.relu(h)?;
        let gb = self.out.forward(g, p, h)?;
        Ok((g.slice(gb, 1, 0, self.width)?, g.slice(gb, 1, self.width, self.width)?))
    }

    /// `γ(d) ⊙ h + β(d)` with `h: [B, .., width]` and `d: [B, 3]`.
    pub fn modulate(&self, g: &mut Graph, p: &Bound, h: Var, d: Var) -> Result<Var> {
        let hs = g.shape(h).to_vec();
        let ds = g.shape(d).to_vec();
        if hs.len() < 2 || hs[hs.len() - 1] != self.width || ds != [hs[0], 3] {
            return Err(Error::shape("film_modulate", &hs, &ds));
        }
        let (gamma, beta) = self.coefficients(g, p, d)?;
        let mut bshape = vec![1; hs.len()];
        bshape[0] = hs[0];
        bshape[hs.len() - 1] = self.width;
        let gamma = g.reshape(gamma, &bshape)?;
        let beta = g.reshape(beta, &bshape)?;
        let scaled = g.mul(h, gamma)?;
        g.add(scaled, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn demographic_encoding() {
        let d = demographic_vector(12.0, Gender::Male, 12.0, 2.0).unwrap();
        assert_eq!(d.to_array(), [0.0, 1.0, 0.0]);
        let d = demographic_vector(14.0, Gender::Female, 12.0, 2.0).unwrap();
        assert_eq!(d.to_array(), [1.0, 0.0, 1.0]);
        assert!(demographic_vector(14.0, Gender::Female, 12.0, 0.0).is_err());
    }

    #[test]
    fn fresh_film_is_identity() {
        let mut store = ParamStore::new();
        let film = FilmLayer::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), "film", 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| true);
        let h = g.constant(Tensor::new(&[2, 3, 4], (0..24).map(|i| i as f64 - 7.0).collect()).unwrap());
        let d = g.constant(Tensor::new(&[2, 3], vec![0.3, 1.0, 0.0, -1.2, 0.0, 1.0]).unwrap());
        let y = film.modulate(&mut g, &p, h, d).unwrap();
        assert_eq!(g.value(y), g.value(h));
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut store = ParamStore::new();
        let film = FilmLayer::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), "film", 2);
        let bias = store.get_mut(film.out.b.unwrap());
        bias.data_mut().copy_from_slice(&[0.0, 0.0, 0.5, -0.25]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| true);
        let h = g.constant(Tensor::new(&[1, 2], vec![9.0, -4.0]).unwrap());
        let d = g.constant(Tensor::new(&[1, 3], vec![0.1, 0.0, 1.0]).unwrap());
        let y = film.modulate(&mut g, &p, h, d).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -0.25]);
    }
}
