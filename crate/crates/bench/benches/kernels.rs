use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ganprotect::data::synth::{synthetic_dataset, SyntheticSpec};
use ganprotect::protect::{project_linf_tensor, protect_image};
use ganprotect::{ssim, ModelHandle, NetworkSpec, PerturbationSpec, SsimParams};
use tch::{Kind, Tensor};

fn bench_ssim(c: &mut Criterion) {
    let mut group = c.benchmark_group("ssim");
    let params = SsimParams::default();
    for side in [32usize, 96] {
        let d = synthetic_dataset(&SyntheticSpec::new(2, 2, side, 1)).unwrap();
        let (a, b) = (&d.items()[0].0, &d.items()[1].0);
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |bench, _| {
            bench.iter(|| ssim(black_box(a), black_box(b), &params).unwrap())
        });
    }
    group.finish();
}

fn bench_projection(c: &mut Criterion) {
    tch::manual_seed(0);
    let spec = PerturbationSpec::new(0.3);
    let x = Tensor::rand([64, 3, 32, 32], (Kind::Float, tch::Device::Cpu));
    let x_p = &x + Tensor::randn([64, 3, 32, 32], (Kind::Float, tch::Device::Cpu));
    c.bench_function("project_linf/64x3x32x32", |b| {
        b.iter(|| project_linf_tensor(black_box(&x_p), black_box(&x), &spec).unwrap())
    });

    let h = ModelHandle::build(&NetworkSpec::resnet18(2).with_width(8).with_seed(0)).unwrap();
    let img = synthetic_dataset(&SyntheticSpec::new(2, 1, 32, 2)).unwrap().items()[0].0.clone();
    let spec = PerturbationSpec::new(0.3).with_iterations(10);
    c.bench_function("protect_image/resnet18w8/10iters", |b| {
        b.iter(|| protect_image(black_box(&img), 0, &h, &spec).unwrap())
    });
}

fn bench_unet(c: &mut Criterion) {
    tch::manual_seed(0);
    let mut group = c.benchmark_group("unet_forward");
    group.sample_size(20);
    for width in [8usize, 32] {
        let g = ModelHandle::build(&NetworkSpec::unet_generator().with_width(width).with_seed(0)).unwrap();
        let x = Tensor::rand([8, 3, 32, 32], (Kind::Float, tch::Device::Cpu)) * 2.0 - 1.0;
        group.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, _| {
            b.iter(|| tch::no_grad(|| g.forward_eval(black_box(&x)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(kernels, bench_ssim, bench_projection, bench_unet);
criterion_main!(kernels);
