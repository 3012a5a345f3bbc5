use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scenario::PlantModel;

/// Simulated robots: first-order velocity lag and additive position noise on
/// top of the single integrator.
#[derive(Debug, Clone)]
pub struct Plant {
    pub model: PlantModel,
    pub dt: f64,
    pub positions: Vec<Vector2<f64>>,
    pub velocities: Vec<Vector2<f64>>,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(model: PlantModel, dt: f64, initial: &[Vector2<f64>], seed: u64) -> Self {
        Self {
            model,
            dt,
            positions: initial.to_vec(),
            velocities: vec![Vector2::zeros(); initial.len()],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Advance every robot by one interval under the given inputs.
    pub fn advance(&mut self, inputs: &[Vector2<f64>]) {
        let noise = (self.model.sigma > 0.0).then(|| Normal::new(0.0, self.model.sigma).expect("finite sigma"));
        for i in 0..self.positions.len() {
            let (x, v) = plant_advance(&self.model, &self.positions[i], &self.velocities[i], &inputs[i], self.dt);
            let mut x = x;
            if let Some(n) = &noise {
                x.x += n.sample(&mut self.rng);
                x.y += n.sample(&mut self.rng);
            }
            self.positions[i] = x;
            self.velocities[i] = v;
        }
    }
}

/// Noise-free part of one plant step: returns `(x⁺, v⁺)`.
pub fn plant_advance(
    model: &PlantModel,
    x: &Vector2<f64>,
    v: &Vector2<f64>,
    u: &Vector2<f64>,
    dt: f64,
) -> (Vector2<f64>, Vector2<f64>) {
    let v_next = if model.tau > 0.0 { v + (u - v) * (dt / model.tau) } else { *u };
    (x + v_next * dt, v_next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_plant_is_integrator() {
        let (x, _) = plant_advance(&PlantModel::default(), &Vector2::zeros(), &Vector2::zeros(), &Vector2::new(0.2, 0.0), 0.2);
        assert!((x - Vector2::new(0.04, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn rest_stays_put() {
        let mut p = Plant::new(PlantModel { tau: 0.5, sigma: 0.0 }, 0.2, &[Vector2::new(1.0, 2.0)], 1);
        p.advance(&[Vector2::zeros()]);
        assert_eq!(p.positions[0], Vector2::new(1.0, 2.0));
    }

    #[test]
    fn lag_approaches_input() {
        let m = PlantModel { tau: 0.4, sigma: 0.0 };
        let (_, v) = plant_advance(&m, &Vector2::zeros(), &Vector2::zeros(), &Vector2::new(1.0, 0.0), 0.2);
        assert!((v.x - 0.5).abs() < 1e-15);
    }
}
