use aff_bench::{rng, tensor};
use aff_core::attention::BranchScales;
use aff_core::autodiff::{Mode, ParamStore, Session};
use aff_core::fusion::{Fusion, FusionKind};
use aff_core::network::Network;
use aff_core::run::RunConfig;
use aff_core::Shape;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

/// Forward plus backward through one fusion site.
fn sites(c: &mut Criterion) {
    let shape = Shape::new(32, 32, 16, 16);
    let (x, y) = (tensor(shape, 1), tensor(shape, 2));
    let mut g = c.benchmark_group("fusion_site");
    for kind in FusionKind::ALL {
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "f", kind, shape.c, 4, BranchScales::MS_CAM, &mut rng(0)).unwrap();
        g.bench_function(BenchmarkId::from_parameter(kind.name()), |b| {
            b.iter(|| {
                let mut s = Session::new(&mut store, Mode::Train);
                let (xv, yv) = (s.input(x.clone()), s.input(y.clone()));
                let z = f.forward(&mut s, xv, yv).unwrap();
                let seed = s.value(z).clone();
                s.backward(z, &seed).unwrap()
            })
        });
    }
    g.finish();
}

/// Eval forward of the default classification network on one batch.
fn networks(c: &mut Criterion) {
    let x = tensor(Shape::new(32, 3, 16, 16), 3);
    let mut g = c.benchmark_group("network_forward");
    g.sample_size(10);
    for fusion in ["add", "aff", "iaff"] {
        let cfg = RunConfig::parse(&format!("fusion = {fusion}")).unwrap();
        let mut net = Network::build(&cfg.network_spec(cfg.num_classes()).unwrap(), 0).unwrap();
        g.bench_function(fusion, |b| b.iter(|| net.forward(&x, Mode::Eval).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, sites, networks);
criterion_main!(benches);
