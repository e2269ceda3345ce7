//! Named parameters, global-norm clipping and the two-group AdamW optimizer.

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoder weights, trained with the small learning rate.
    Backbone,
    /// Projection, SCA, attention and head weights.
    NewModule,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::NewModule => "new",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(ParamGroup::Backbone),
            "new" => Some(ParamGroup::NewModule),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: DenseTensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Owns every parameter of a model in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: DenseTensor,
        group: ParamGroup,
    ) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            tensor,
            trainable: true,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        let p = &mut self.params[id.0];
        p.trainable = flag;
        p.tensor.set_requires_grad(flag);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            let _ = p.tensor.set_grad(None);
        }
    }

    /// Copies gradients of every trainable parameter recorded on `graph`
    /// into the store. Recorded parameters that the loss does not reach get
    /// an explicit zero gradient.
    pub fn collect_grads(&mut self, graph: &Graph) -> Result<()> {
        self.zero_grads();
        for (id, var) in graph.param_vars() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let g = match graph.grad(var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.tensor.numel()],
            };
            p.tensor.set_grad(Some(g))?;
        }
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }
}

/// Scales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the applied factor (1 when no scaling was needed).
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = store
        .params
        .iter()
        .filter(|p| p.trainable)
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for p in store.params.iter_mut().filter(|p| p.trainable) {
        if let Some(g) = p.tensor.grad_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    scale
}

/// Adam with decoupled weight decay and one learning rate per [`ParamGroup`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_new: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr_backbone: f64, lr_new: f64, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            lr_backbone,
            lr_new,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::NewModule => self.lr_new,
        }
    }

    /// First and second moments of a parameter, if it has been stepped.
    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(id.0)
            .and_then(|m| m.as_ref())
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Restores saved state (used by checkpoint loading).
    pub fn restore(&mut self, step: u64, moments: Vec<Option<(Vec<f64>, Vec<f64>)>>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update of every trainable parameter. Fails without touching any
    /// parameter if a trainable one has no gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for p in &store.params {
            if p.trainable && p.tensor.grad().is_none() {
                return Err(Error::State(format!(
                    "trainable parameter {} has no gradient",
                    p.name
                )));
            }
        }
        if self.moments.len() < store.params.len() {
            self.moments.resize(store.params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let lr = match p.group {
                ParamGroup::Backbone => self.lr_backbone,
                ParamGroup::NewModule => self.lr_new,
            };
            let n = p.tensor.numel();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let decay = 1.0 - lr * self.weight_decay;
            let data = p.tensor.data_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] = data[j] * decay - lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_with(values: &[f64], grads: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add(
            "w",
            DenseTensor::new([values.len()], values.to_vec()).unwrap(),
            ParamGroup::NewModule,
        );
        s.get_mut(id).tensor.set_grad(Some(grads.to_vec())).unwrap();
        s
    }

    #[test]
    fn first_adam_step_closed_form() {
        let mut s = store_with(&[1.0], &[1.0]);
        let mut opt = AdamW::new(0.0, 0.1, 0.0);
        opt.step(&mut s).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(ParamId(0)).tensor.data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn frozen_parameter_is_bitwise_unchanged() {
        let mut s = store_with(&[0.123456789, -2.5], &[3.0, -7.0]);
        s.set_trainable(ParamId(0), false);
        s.get_mut(ParamId(0))
            .tensor
            .set_grad(Some(vec![3.0, -7.0]))
            .unwrap();
        let before: Vec<u64> = s
            .get(ParamId(0))
            .tensor
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let mut opt = AdamW::new(0.1, 0.1, 0.5);
        for _ in 0..3 {
            opt.step(&mut s).unwrap();
        }
        let after: Vec<u64> = s
            .get(ParamId(0))
            .tensor
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);
        assert!(opt.moments(ParamId(0)).is_none());
    }

    #[test]
    fn group_learning_rates_scale_updates() {
        let mut s = ParamStore::new();
        let a = s.add("a", DenseTensor::full([4], 0.5), ParamGroup::Backbone);
        let b = s.add("b", DenseTensor::full([4], 0.5), ParamGroup::NewModule);
        for id in [a, b] {
            s.get_mut(id)
                .tensor
                .set_grad(Some(vec![0.3, -0.2, 1.5, 0.01]))
                .unwrap();
        }
        let mut opt = AdamW::new(1e-6, 1e-4, 0.0);
        opt.step(&mut s).unwrap();
        for j in 0..4 {
            let da = 0.5 - s.get(a).tensor.data()[j];
            let db = 0.5 - s.get(b).tensor.data()[j];
            assert!(((db / da) - 100.0).abs() / 100.0 < 1e-9, "{}", db / da);
        }
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut s = ParamStore::new();
        s.add("w", DenseTensor::full([2], 1.0), ParamGroup::NewModule);
        let mut opt = AdamW::new(0.1, 0.1, 0.0);
        assert!(matches!(opt.step(&mut s), Err(Error::State(_))));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn clip_examples() {
        let mut s = store_with(&[0.0, 0.0], &[6.0, 8.0]);
        let scale = clip_global_norm(&mut s, 5.0);
        assert!((scale - 0.5).abs() < 1e-15);
        let g = s.get(ParamId(0)).tensor.grad().unwrap();
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 5.0).abs() < 1e-12);

        let mut s = store_with(&[0.0], &[3.0]);
        assert_eq!(clip_global_norm(&mut s, 5.0), 1.0);
        assert_eq!(s.get(ParamId(0)).tensor.grad().unwrap(), &[3.0]);

        let mut s = store_with(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(clip_global_norm(&mut s, 5.0), 1.0);
    }

    proptest! {
        #[test]
        fn clip_is_idempotent(grads in prop::collection::vec(-50.0f64..50.0, 1..20), max in 0.1f64..10.0) {
            let mut s = store_with(&vec![0.0; grads.len()], &grads);
            clip_global_norm(&mut s, max);
            let once = s.get(ParamId(0)).tensor.grad().unwrap().to_vec();
            clip_global_norm(&mut s, max);
            let twice = s.get(ParamId(0)).tensor.grad().unwrap().to_vec();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn frozen_params_never_move(vals in prop::collection::vec(-5.0f64..5.0, 1..8), lr in 1e-6f64..1.0) {
            let mut s = store_with(&vals, &vals);
            s.set_trainable(ParamId(0), false);
            let mut opt = AdamW::new(lr, lr, 0.1);
            opt.step(&mut s).unwrap();
            prop_assert_eq!(s.get(ParamId(0)).tensor.data(), vals.as_slice());
        }
    }
}
