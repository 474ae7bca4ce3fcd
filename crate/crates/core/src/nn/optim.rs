//! Adam with bias correction, plus a reduce-on-plateau learning-rate
//! schedule driven by validation loss.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Adam moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Reduce-on-plateau schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    /// Consecutive non-improving observations before the rate drops.
    pub patience: u32,
    /// Multiplier applied to the learning rate on a plateau.
    pub factor: f64,
    /// Improvements smaller than this don't count.
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 10,
            factor: 0.5,
            min_delta: 1e-6,
        }
    }
}

/// Serializable optimizer state, for checkpoints that resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step_count: u64,
    pub learning_rate: f64,
    pub best_val: f64,
    pub stale_observations: u32,
    /// Per parameter: shape, first moment, second moment.
    pub moments: Vec<(Vec<usize>, Vec<f32>, Vec<f32>)>,
}

/// Adam optimizer bound to one model's parameter list.
///
/// Moment buffers are allocated on the first [`Adam::step`] call and must
/// keep matching the parameter shapes afterwards; a changed parameter list
/// is an error rather than a silent reset.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub learning_rate: f64,
    pub step_count: u64,
    cfg: AdamConfig,
    plateau: PlateauConfig,
    best_val: f64,
    stale_observations: u32,
    moments: Option<Vec<(ArrayD<S>, ArrayD<S>)>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(learning_rate: f64, cfg: AdamConfig, plateau: PlateauConfig) -> Result<Adam<S>> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if plateau.patience == 0 || !(plateau.factor > 0.0 && plateau.factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau schedule needs patience >= 1 and factor in (0, 1); got {} / {}",
                plateau.patience, plateau.factor
            )));
        }
        Ok(Adam {
            learning_rate,
            step_count: 0,
            cfg,
            plateau,
            best_val: f64::INFINITY,
            stale_observations: 0,
            moments: None,
        })
    }

    /// One update over the model's parameters (canonical order). Consumes
    /// the accumulated gradients; the caller zeroes them afterwards.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<S>)]) -> Result<()> {
        if self.moments.is_none() {
            self.moments = Some(
                params
                    .iter()
                    .map(|(_, t)| {
                        (
                            ArrayD::zeros(t.data.raw_dim()),
                            ArrayD::zeros(t.data.raw_dim()),
                        )
                    })
                    .collect(),
            );
        }
        let moments = self.moments.as_mut().expect("just initialized");
        if moments.len() != params.len() {
            return Err(Error::Train(format!(
                "parameter list changed: optimizer tracks {} tensors, step got {}",
                moments.len(),
                params.len()
            )));
        }

        self.step_count += 1;
        let t = self.step_count;
        let b1 = S::of(self.cfg.beta1);
        let b2 = S::of(self.cfg.beta2);
        let one_m_b1 = S::of(1.0 - self.cfg.beta1);
        let one_m_b2 = S::of(1.0 - self.cfg.beta2);
        let bc1 = S::of(1.0 - self.cfg.beta1.powi(t as i32));
        let bc2 = S::of(1.0 - self.cfg.beta2.powi(t as i32));
        let eps = S::of(self.cfg.eps);
        let lr = S::of(self.learning_rate);

        for ((name, param), (m, v)) in params.iter_mut().zip(moments.iter_mut()) {
            if m.shape() != param.data.shape() {
                return Err(Error::Train(format!(
                    "parameter {name} changed shape: optimizer tracks {:?}, got {:?}",
                    m.shape(),
                    param.data.shape()
                )));
            }
            ndarray::Zip::from(&mut param.data)
                .and(&param.grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + one_m_b1 * g;
                    *v = b2 * *v + one_m_b2 * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }

    /// Feed one validation loss into the plateau schedule. Returns `true`
    /// when the learning rate was just reduced.
    pub fn observe_validation(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best_val - self.plateau.min_delta {
            self.best_val = val_loss;
            self.stale_observations = 0;
            return false;
        }
        self.stale_observations += 1;
        if self.stale_observations >= self.plateau.patience {
            self.learning_rate *= self.plateau.factor;
            self.stale_observations = 0;
            return true;
        }
        false
    }

    /// Export resumable state; `None` before the first step.
    pub fn snapshot(&self) -> Option<AdamSnapshot> {
        self.moments.as_ref().map(|moments| AdamSnapshot {
            step_count: self.step_count,
            learning_rate: self.learning_rate,
            best_val: self.best_val,
            stale_observations: self.stale_observations,
            moments: moments
                .iter()
                .map(|(m, v)| {
                    (
                        m.shape().to_vec(),
                        m.iter().map(|x| x.wide() as f32).collect(),
                        v.iter().map(|x| x.wide() as f32).collect(),
                    )
                })
                .collect(),
        })
    }

    /// Restore state exported by [`Adam::snapshot`].
    pub fn restore(&mut self, snap: &AdamSnapshot) -> Result<()> {
        let mut moments = Vec::with_capacity(snap.moments.len());
        for (shape, m, v) in &snap.moments {
            let expect: usize = shape.iter().product();
            if m.len() != expect || v.len() != expect {
                return Err(Error::Checkpoint(format!(
                    "moment buffer holds {}/{} values for shape {shape:?}",
                    m.len(),
                    v.len()
                )));
            }
            let m = ArrayD::from_shape_vec(
                ndarray::IxDyn(shape),
                m.iter().map(|&x| S::of(f64::from(x))).collect(),
            )
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let v = ArrayD::from_shape_vec(
                ndarray::IxDyn(shape),
                v.iter().map(|&x| S::of(f64::from(x))).collect(),
            )
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
            moments.push((m, v));
        }
        self.step_count = snap.step_count;
        self.learning_rate = snap.learning_rate;
        self.best_val = snap.best_val;
        self.stale_observations = snap.stale_observations;
        self.moments = Some(moments);
        Ok(())
    }
}
