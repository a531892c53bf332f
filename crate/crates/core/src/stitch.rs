//! Online discriminator assembled from the offline density ratio and the
//! saddle-point ratio, with no extra training.
//!
//! With `d = rho_e / (rho_e + rho_o)` and `rho* = alpha y rho_o`, the
//! expression `(1 + d / ((1 - d) alpha y))^-1` equals `rho* / (rho* + rho_e)`,
//! which is the adversarial discriminator that is optimal against `rho*`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{EmpiricalDistribution, Obs};
use crate::error::{Error, Result};
use crate::nn::{self, GradientBuffer, Mlp};
use crate::reward::{DensityDiscriminator, Featurizer};

/// Positive ratio `y(s,a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatioModel {
    Table {
        y: Array2<f64>,
    },
    /// Network emitting `log y`.
    Network {
        net: Mlp,
        featurizer: Featurizer,
    },
}

impl RatioModel {
    pub fn log_y(&self, s: &Obs, a: &Obs) -> Result<f64> {
        match self {
            RatioModel::Table { y } => {
                let (s, a) = (s.index()?, a.index()?);
                y.get((s, a))
                    .map(|v| v.ln())
                    .ok_or_else(|| Error::invalid(format!("pair ({s}, {a}) out of range")))
            }
            RatioModel::Network { net, featurizer } => Ok(net.forward(&featurizer.pair(s, a)?)?[0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchedDiscriminator {
    pub d_part: DensityDiscriminator,
    pub y_part: RatioModel,
    pub alpha: f64,
    /// Whether online updates reach both parameter sets.
    pub trainable: bool,
}

pub fn stitch_discriminator(d: DensityDiscriminator, y: RatioModel, alpha: f64) -> Result<StitchedDiscriminator> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if let RatioModel::Table { y } = &y {
        if y.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("y must be positive and finite"));
        }
    }
    let trainable = matches!(
        (&d, &y),
        (DensityDiscriminator::Network { .. }, RatioModel::Network { .. })
    );
    Ok(StitchedDiscriminator {
        d_part: d,
        y_part: y,
        alpha,
        trainable,
    })
}

impl StitchedDiscriminator {
    /// `log(alpha y) - logit(d)` with `d` clipped.
    pub fn logit(&self, s: &Obs, a: &Obs) -> Result<f64> {
        let d = self.d_part.prob(s, a)?;
        Ok(self.alpha.ln() + self.y_part.log_y(s, a)? - nn::logit(d))
    }

    pub fn prob(&self, s: &Obs, a: &Obs) -> Result<f64> {
        Ok(nn::sigmoid(self.logit(s, a)?))
    }

    pub fn logit_table(&self, n_states: usize, n_actions: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((n_states, n_actions));
        for ((s, a), v) in out.indexed_iter_mut() {
            *v = self.logit(&Obs::Index(s), &Obs::Index(a))?;
        }
        Ok(out)
    }

    pub fn table(&self, n_states: usize, n_actions: usize) -> Result<Array2<f64>> {
        Ok(self.logit_table(n_states, n_actions)?.mapv(nn::sigmoid))
    }

    /// Adds `coef * d logit / d params` to the two buffers (discriminator
    /// network first, ratio network second). The clipped branch of `d` has
    /// zero gradient.
    pub fn add_logit_grad(
        &self,
        s: &Obs,
        a: &Obs,
        coef: f64,
        d_grads: &mut GradientBuffer,
        y_grads: &mut GradientBuffer,
    ) -> Result<f64> {
        let (d_net, d_feat, clip) = match &self.d_part {
            DensityDiscriminator::Network { net, featurizer, clip } => (net, featurizer, clip),
            DensityDiscriminator::Tabular { .. } => {
                return Err(Error::invalid("tabular stitched parts are not trainable"))
            }
        };
        let (y_net, y_feat) = match &self.y_part {
            RatioModel::Network { net, featurizer } => (net, featurizer),
            RatioModel::Table { .. } => return Err(Error::invalid("tabular stitched parts are not trainable")),
        };
        let d_trace = d_net.forward_trace(&d_feat.pair(s, a)?)?;
        let z = d_trace.output()[0];
        let p = nn::sigmoid(z);
        let clipped = clip.apply(p);
        if clipped == p {
            d_net.backward(&d_trace, &[-coef], d_grads)?;
        }
        let y_trace = y_net.forward_trace(&y_feat.pair(s, a)?)?;
        y_net.backward(&y_trace, &[coef], y_grads)?;
        Ok(self.alpha.ln() + y_trace.output()[0] - nn::logit(clipped))
    }

    /// Mutable access to `(discriminator net, ratio net)` when trainable.
    pub fn networks_mut(&mut self) -> Option<(&mut Mlp, &mut Mlp)> {
        match (&mut self.d_part, &mut self.y_part) {
            (DensityDiscriminator::Network { net: d, .. }, RatioModel::Network { net: y, .. }) => Some((d, y)),
            _ => None,
        }
    }
}

/// Largest deviation between the stitched table and
/// `rho* / (rho* + rho_e)`, `rho* = alpha y rho_o`, over pairs where both
/// `rho_e` and `rho_o` are positive.
pub fn verify_alignment(
    stitched: &StitchedDiscriminator,
    rho_e: &EmpiricalDistribution,
    y_star: &Array2<f64>,
    rho_o: &EmpiricalDistribution,
) -> Result<f64> {
    let dim = y_star.dim();
    if rho_e.dim() != dim || rho_o.dim() != dim {
        return Err(Error::shape(
            format!("{dim:?}"),
            format!("{:?} / {:?}", rho_e.dim(), rho_o.dim()),
        ));
    }
    let table = stitched.table(dim.0, dim.1)?;
    let mut worst: f64 = 0.0;
    for ((s, a), &pe) in rho_e.probs().indexed_iter() {
        let po = rho_o.get(s, a);
        if pe > 0.0 && po > 0.0 {
            let rho_star = stitched.alpha * y_star[[s, a]] * po;
            worst = worst.max((table[[s, a]] - rho_star / (rho_star + pe)).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{fit_discriminator_closed_form, ClipBounds};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_d(p: f64) -> DensityDiscriminator {
        DensityDiscriminator::Tabular {
            values: Array2::from_elem((1, 1), p),
            defined: Array2::from_elem((1, 1), true),
            clip: ClipBounds::default(),
        }
    }

    fn unit_y(v: f64) -> RatioModel {
        RatioModel::Table {
            y: Array2::from_elem((1, 1), v),
        }
    }

    #[test]
    fn formula_examples() {
        let at = |p, y, alpha| {
            stitch_discriminator(constant_d(p), unit_y(y), alpha)
                .unwrap()
                .table(1, 1)
                .unwrap()[[0, 0]]
        };
        assert!((at(0.5, 1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((at(0.9, 1.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((at(0.5, 1.0, 2.0) - 2.0 / 3.0).abs() < 1e-15);
        // Clipping applies before stitching.
        assert!((at(0.99, 1.0, 1.0) - 0.1).abs() < 1e-15);
        assert!(stitch_discriminator(constant_d(0.5), unit_y(1.0), 0.0).is_err());
        assert!(stitch_discriminator(constant_d(0.5), unit_y(0.0), 1.0).is_err());
    }

    #[test]
    fn monotone_in_both_parts() {
        let mut last = 0.0;
        for y in [0.1, 0.5, 1.0, 2.0, 10.0] {
            let v = stitch_discriminator(constant_d(0.4), unit_y(y), 1.0)
                .unwrap()
                .table(1, 1)
                .unwrap()[[0, 0]];
            assert!(v > last && v < 1.0);
            last = v;
        }
        let mut last = 1.0;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let v = stitch_discriminator(constant_d(p), unit_y(1.5), 1.0)
                .unwrap()
                .table(1, 1)
                .unwrap()[[0, 0]];
            assert!(v < last && v > 0.0);
            last = v;
        }
    }

    fn random_dist(rng: &mut ChaCha8Rng, n_s: usize, n_a: usize) -> EmpiricalDistribution {
        EmpiricalDistribution::from_table(Array2::from_shape_fn((n_s, n_a), |_| rng.random_range(0.1..1.0))).unwrap()
    }

    #[test]
    fn closed_form_alignment_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let rho_e = random_dist(&mut rng, 4, 3);
            let rho_o = random_dist(&mut rng, 4, 3);
            let d = fit_discriminator_closed_form(&rho_e, &rho_o)
                .unwrap()
                .with_clip(ClipBounds::new(1e-6, 1.0 - 1e-6).unwrap());
            let y = Array2::from_shape_fn((4, 3), |_| rng.random_range(0.05..20.0));
            let alpha = rng.random_range(0.3..3.0);
            let stitched = stitch_discriminator(d, RatioModel::Table { y: y.clone() }, alpha).unwrap();
            assert!(verify_alignment(&stitched, &rho_e, &y, &rho_o).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn optimal_against_expert_occupancy_is_one_half() {
        // rho* = rho_e means alpha y = rho_e / rho_o.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho_e = random_dist(&mut rng, 3, 2);
        let rho_o = random_dist(&mut rng, 3, 2);
        let y = rho_e.probs() / rho_o.probs();
        let d = fit_discriminator_closed_form(&rho_e, &rho_o)
            .unwrap()
            .with_clip(ClipBounds::new(1e-6, 1.0 - 1e-6).unwrap());
        let stitched = stitch_discriminator(d, RatioModel::Table { y }, 1.0).unwrap();
        for v in stitched.table(3, 2).unwrap() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_discriminator_stays_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho_e = random_dist(&mut rng, 4, 2);
        let rho_o = random_dist(&mut rng, 4, 2);
        let exact = fit_discriminator_closed_form(&rho_e, &rho_o).unwrap();
        let DensityDiscriminator::Tabular { values, defined, .. } = exact else {
            unreachable!()
        };
        let eps = 0.02;
        let noisy = values.mapv(|v| (v + rng.random_range(-eps..eps)).clamp(0.01, 0.99));
        let d = DensityDiscriminator::Tabular {
            values: noisy,
            defined,
            clip: ClipBounds::new(1e-3, 1.0 - 1e-3).unwrap(),
        };
        let y = Array2::from_shape_fn((4, 2), |_| rng.random_range(0.5..2.0));
        let stitched = stitch_discriminator(d, RatioModel::Table { y: y.clone() }, 1.0).unwrap();
        assert!(verify_alignment(&stitched, &rho_e, &y, &rho_o).unwrap() <= 0.05);
    }

    #[test]
    fn network_logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feat = Featurizer::OneHot {
            n_states: 3,
            n_actions: 2,
        };
        let d_net = Mlp::new(&[5, 6, 1], &mut rng);
        let y_net = Mlp::new(&[5, 6, 1], &mut rng);
        let d = DensityDiscriminator::Network {
            net: d_net,
            featurizer: feat.clone(),
            clip: ClipBounds::new(1e-4, 1.0 - 1e-4).unwrap(),
        };
        let y = RatioModel::Network {
            net: y_net,
            featurizer: feat,
        };
        let stitched = stitch_discriminator(d, y, 1.5).unwrap();
        assert!(stitched.trainable);
        let pairs: Vec<(usize, usize)> = (0..6).map(|i| (i % 3, i % 2)).collect();
        let loss = |m: &StitchedDiscriminator| -> f64 {
            pairs
                .iter()
                .map(|&(s, a)| nn::log_sigmoid(m.logit(&Obs::Index(s), &Obs::Index(a)).unwrap()))
                .sum()
        };
        let mut model = stitched.clone();
        let (d_net, y_net) = model.networks_mut().unwrap();
        let mut gd = d_net.zero_grad();
        let mut gy = y_net.zero_grad();
        for &(s, a) in &pairs {
            let l = stitched.logit(&Obs::Index(s), &Obs::Index(a)).unwrap();
            stitched
                .add_logit_grad(&Obs::Index(s), &Obs::Index(a), 1.0 - nn::sigmoid(l), &mut gd, &mut gy)
                .unwrap();
        }
        let n_d = gd.0.len();
        let (d_net, y_net) = model.networks_mut().unwrap();
        let params: Vec<f64> = d_net.params().iter().chain(y_net.params()).copied().collect();
        let analytic: Vec<f64> = gd.0.iter().chain(&gy.0).copied().collect();
        let coords = nn::sample_coords(params.len(), 100, &mut rng);
        let err = nn::max_relative_gradient_error(
            |p| {
                let mut m = stitched.clone();
                let (d_net, y_net) = m.networks_mut().unwrap();
                d_net.params_mut().copy_from_slice(&p[..n_d]);
                y_net.params_mut().copy_from_slice(&p[n_d..]);
                loss(&m)
            },
            &params,
            &analytic,
            &coords,
            1e-5,
            1e-6,
        );
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn round_trips_through_json() {
        let stitched = stitch_discriminator(constant_d(0.3), unit_y(2.0), 0.5).unwrap();
        let back: StitchedDiscriminator = serde_json::from_str(&serde_json::to_string(&stitched).unwrap()).unwrap();
        assert_eq!(back, stitched);
    }
}
