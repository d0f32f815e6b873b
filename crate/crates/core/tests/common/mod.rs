//! Add-fusion networks rebuilt by hand from kernels, reading the same
//! named parameters.

use std::cell::RefCell;
use std::collections::BTreeSet;

use aff_core::autodiff::{Mode, ParamStore};
use aff_core::fusion::FusionKind;
use aff_core::kernels::{self, Activation, BatchNormState, BnMode, ConvParams};
use aff_core::network::{Network, NetworkSpec, Scenario};
use aff_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Oracle<'a> {
    store: &'a ParamStore,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> Oracle<'a> {
    fn new(store: &'a ParamStore) -> Self {
        Oracle {
            store,
            used: RefCell::new(BTreeSet::new()),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.store.find(name).is_some()
    }

    fn p(&self, name: &str) -> Tensor {
        let id = self.store.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.used.borrow_mut().insert(name.to_string());
        self.store.get(id).value.clone()
    }

    fn conv(&self, x: &Tensor, name: &str, stride: usize, bias: bool) -> Tensor {
        let kernel = self.p(&format!("{name}.kernel"));
        let padding = kernel.shape().h / 2;
        let bias = bias.then(|| self.p(&format!("{name}.bias")).data().to_vec());
        kernels::conv2d(x, &ConvParams { kernel, stride, padding, bias }).unwrap()
    }

    fn bn(&self, x: &Tensor, name: &str) -> Tensor {
        let st = self.store.all_stats().iter().find(|s| s.name == name).unwrap();
        let mut state = BatchNormState {
            gamma: self.p(&format!("{name}.gamma")).data().to_vec(),
            beta: self.p(&format!("{name}.beta")).data().to_vec(),
            running_mean: st.mean.clone(),
            running_var: st.var.clone(),
            eps: st.eps,
            momentum: st.momentum,
            mode: BnMode::Eval,
        };
        kernels::batch_norm(x, &mut state).unwrap()
    }

    fn conv_bn(&self, x: &Tensor, name: &str, stride: usize) -> Tensor {
        self.bn(&self.conv(x, &format!("{name}.conv"), stride, false), &format!("{name}.bn"))
    }

    fn relu(x: &Tensor) -> Tensor {
        kernels::activation(x, Activation::Relu)
    }

    fn add(a: &Tensor, b: &Tensor) -> Tensor {
        kernels::broadcast_add(a, b).unwrap()
    }

    fn shortcut(&self, x: &Tensor, path: &str, stride: usize) -> Tensor {
        if self.has(&format!("{path}.shortcut.conv.kernel")) {
            self.conv_bn(x, &format!("{path}.shortcut"), stride)
        } else {
            x.clone()
        }
    }

    fn res_block(&self, x: &Tensor, path: &str, stride: usize) -> Tensor {
        let r = Self::relu(&self.conv_bn(x, &format!("{path}.conv1"), stride));
        let r = self.conv_bn(&r, &format!("{path}.conv2"), 1);
        Self::relu(&Self::add(&self.shortcut(x, path, stride), &r))
    }

    fn inception_block(&self, x: &Tensor, path: &str, stride: usize) -> Tensor {
        let h = Self::relu(&self.conv_bn(x, &format!("{path}.conv_in"), stride));
        let a = Self::relu(&self.conv_bn(&h, &format!("{path}.branch3"), 1));
        let b = Self::relu(&self.conv_bn(&h, &format!("{path}.branch5"), 1));
        Self::relu(&Self::add(&self.shortcut(x, path, stride), &Self::add(&a, &b)))
    }

    /// Stem and all stages; returns the output of every stage.
    fn backbone(&self, x: &Tensor, spec: &NetworkSpec, inception: bool) -> Vec<Tensor> {
        let mut h = Self::relu(&self.conv_bn(x, "stem", 1));
        let mut levels = Vec::new();
        for stage in 1..=spec.stages {
            for block in 1..=spec.b {
                let stride = if stage > 1 && block == 1 { 2 } else { 1 };
                let path = format!("stage{stage}.block{block}");
                h = if inception {
                    self.inception_block(&h, &path, stride)
                } else {
                    self.res_block(&h, &path, stride)
                };
            }
            levels.push(h.clone());
        }
        levels
    }

    fn classifier(&self, x: &Tensor, spec: &NetworkSpec, inception: bool) -> Tensor {
        let top = self.backbone(x, spec, inception).pop().unwrap();
        let pooled = kernels::global_avg_pool(&top);
        let w = self.p("fc.weight");
        let b = self.p("fc.bias");
        kernels::fully_connected(&pooled, &w, Some(b.data())).unwrap()
    }

    fn segmenter(&self, x: &Tensor, spec: &NetworkSpec) -> Tensor {
        let levels = self.backbone(x, spec, false);
        let mut p = levels.last().unwrap().clone();
        for level in (0..spec.stages - 1).rev() {
            let lat = self.conv_bn(&levels[level], &format!("lateral{}", level + 1), 1);
            p = Self::add(&lat, &kernels::nearest_upsample2x(&p));
        }
        self.conv(&p, "head", 1, true)
    }

    fn all_used(&self) -> bool {
        let all: BTreeSet<String> = self.store.params().iter().map(|p| p.name.clone()).collect();
        *self.used.borrow() == all
    }
}

fn randomize_stats(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for st in net.store.all_stats_mut() {
        for m in &mut st.mean {
            *m = rng.random_range(-0.3..0.3);
        }
        for v in &mut st.var {
            *v = rng.random_range(0.5..2.0);
        }
    }
    for p in net.store.params_mut() {
        if p.name.ends_with(".beta") || p.name.ends_with(".bias") {
            p.value = Tensor::uniform(p.value.shape(), -0.2, 0.2, &mut rng);
        }
    }
}

fn input(n: usize, side: usize, seed: u64) -> Tensor {
    Tensor::uniform(Shape::new(n, 3, side, side), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Max |network − composed graph| in eval mode, and whether the composed
/// graph read exactly the network's parameters.
pub fn compare_with_composed(spec: &NetworkSpec, side: usize) -> (f64, bool) {
    let mut net = Network::build(spec, 3).unwrap();
    randomize_stats(&mut net, 4);
    let x = input(2, side, 5);
    let got = net.forward(&x, Mode::Eval).unwrap();
    let oracle = Oracle::new(&net.store);
    let want = match spec.scenario {
        Scenario::ShortSkip => oracle.classifier(&x, spec, false),
        Scenario::SameLayer => oracle.classifier(&x, spec, true),
        Scenario::LongSkip => oracle.segmenter(&x, spec),
    };
    assert_eq!(got.shape(), want.shape());
    (got.max_abs_diff(&want), oracle.all_used())
}

/// Per-block parameter counts of the 16/32/64-channel host with add fusion.
pub fn analytic_resnet_params(b: usize, classes: usize) -> usize {
    let stem = 3 * 16 * 9 + 2 * 16;
    let block = |cin: usize, cout: usize, project: bool| {
        let mut n = cin * cout * 9 + cout * cout * 9 + 4 * cout;
        if project {
            n += cin * cout + 2 * cout;
        }
        n
    };
    let mut total = stem + 64 * classes + classes;
    for (stage, c) in [16usize, 32, 64].into_iter().enumerate() {
        for i in 0..b {
            let first = i == 0 && stage > 0;
            total += block(if first { c / 2 } else { c }, c, first);
        }
    }
    total
}

pub fn add_spec(scenario: Scenario) -> NetworkSpec {
    NetworkSpec {
        scenario,
        fusion: FusionKind::Add,
        base_channels: 8,
        num_classes: 5,
        b: 2,
        ..NetworkSpec::default()
    }
}
