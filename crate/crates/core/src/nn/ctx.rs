use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{Initializer, ParamStore};
use super::tensor::Tensor;

/// Weight initialisation used when a parameter is created.
#[derive(Clone, Copy, Debug)]
pub enum WeightInit {
    /// He-normal scaled by `gain`.
    He { gain: f64 },
    Normal { std: f64 },
    Zeros,
}

impl WeightInit {
    pub const HE: Self = Self::He { gain: 1.0 };
}

enum Store<'a> {
    Frozen(&'a ParamStore),
    Init {
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
    },
}

/// Forward-pass context: a graph plus the parameters layers read from.
///
/// In init mode, a layer whose parameters are missing creates them from
/// the generator, so running a forward pass once on a dummy input defines
/// every parameter in call order.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: Store<'a>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            g,
            store: Store::Frozen(store),
        }
    }

    pub fn initializing(g: &'a mut Graph, store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            g,
            store: Store::Init { store, rng },
        }
    }

    pub fn store(&self) -> &ParamStore {
        match &self.store {
            Store::Frozen(s) => s,
            Store::Init { store, .. } => store,
        }
    }

    /// Binds `name`, creating it with `shape` and `init` in init mode.
    pub fn param(&mut self, name: &str, shape: &[usize], init: WeightInit) -> Var {
        if let Store::Init { store, rng } = &mut self.store {
            if !store.contains(name) {
                let mut i = Initializer { store, rng };
                match init {
                    WeightInit::He { gain } => {
                        let fan_in: usize = shape[1..].iter().product();
                        i.normal(name, shape, gain * (2.0 / fan_in.max(1) as f64).sqrt());
                    }
                    WeightInit::Normal { std } => i.normal(name, shape, std),
                    WeightInit::Zeros => i.zeros(name, shape),
                }
            }
        }
        let store: &ParamStore = match &self.store {
            Store::Frozen(s) => s,
            Store::Init { store, .. } => store,
        };
        let v = self.g.param(store, name);
        assert_eq!(
            self.g.shape(v),
            shape,
            "parameter `{name}` has shape {:?}, layer expects {shape:?}",
            self.g.shape(v)
        );
        v
    }

    /// `k × k` convolution with padding `k / 2`; weight `{name}.w`, bias `{name}.b`.
    pub fn conv(&mut self, name: &str, x: Var, out: usize, k: usize, stride: usize, bias: bool, init: WeightInit) -> Var {
        let inp = self.g.shape(x)[1];
        let w = self.param(&format!("{name}.w"), &[out, inp, k, k], init);
        let b = bias.then(|| self.param(&format!("{name}.b"), &[out], WeightInit::Zeros));
        self.g.conv2d(x, w, b, stride, k / 2)
    }

    pub fn linear(&mut self, name: &str, x: Var, out: usize, init: WeightInit) -> Var {
        let inp = self.g.shape(x)[1];
        let w = self.param(&format!("{name}.w"), &[out, inp], init);
        let b = self.param(&format!("{name}.b"), &[out], WeightInit::Zeros);
        self.g.linear(x, w, b)
    }

    pub fn deconv2x2(&mut self, name: &str, x: Var, out: usize, init: WeightInit) -> Var {
        let inp = self.g.shape(x)[1];
        let w = self.param(&format!("{name}.w"), &[inp, out, 2, 2], init);
        let b = self.param(&format!("{name}.b"), &[out], WeightInit::Zeros);
        self.g.deconv2x2(x, w, b)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }
}
