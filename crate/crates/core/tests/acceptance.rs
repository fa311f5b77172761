//! Acceptance gates, one per criterion.
//!
//! Runs every criterion and prints one `PASS`/`FAIL` line each. Pass
//! criterion numbers to run a subset:
//!
//! ```text
//! cargo test -p ganprotect --test acceptance -- 1 5 10
//! ```
//!
//! Criterion 8 writes full-size dataset files into a temporary directory.
//! To check real copies instead, point `GANPROTECT_CIFAR10`,
//! `GANPROTECT_CIFAR100` or `GANPROTECT_STL10` at their extracted
//! directories.

use std::io::{Read, Seek, SeekFrom};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ganprotect::attacks::{evaluate_attack, train_ga, BlockShuffle, GaConfig, IdentityScheme};
use ganprotect::classify::{evaluate_accuracy, mean_cross_entropy, train_classifier, ClassifyConfig};
use ganprotect::config::RawConfig;
use ganprotect::data::synth::{synthetic_dataset, SyntheticSpec};
use ganprotect::data::{load_cifar10, load_cifar100, load_stl10, LabeledDataset};
use ganprotect::losses::{
    adversarial_loss, classification_loss, cycle_consistency_loss, feature_loss, full_objective,
    reconstruction_loss,
};
use ganprotect::protect::{protect_dataset, protect_image};
use ganprotect::transform::{train_cyclegan, CycleGanConfig, CycleGanTrainer};
use ganprotect::{
    run, ssim, ExperimentConfig, ImageTensor, LossReport, LossWeights, ModelHandle, NetworkSpec,
    NormReduction, PerturbationSpec, RunStatus, SeedStream, Split, SsimParams, ValueRange,
};
use rand::Rng;
use tch::{Kind, Tensor};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1 ------------------------------------------------------------------------

fn loss_algebra() -> Verdict {
    let w = LossWeights::default();
    let worked = cycle_consistency_loss(2.0, 1.0, 3.0, &w);
    if worked != 1.1 {
        return Err(format!("(2,1,3) composed to {worked}, expected 1.1"));
    }
    let mut rng = SeedStream::new(1).rng("loss-algebra", 0);
    let mut worst = 0f64;
    for i in 0..1000 {
        let w = LossWeights {
            lambda: rng.gen_range(0.0..2.0),
            gamma1: rng.gen_range(-2.0..2.0),
            gamma2: rng.gen_range(-2.0..2.0),
            gamma3: rng.gen_range(-2.0..2.0),
        };
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..10.0)).collect();
        let r = LossReport::compose(i, 0, v[0], v[1], v[2], v[3], v[4], v[5], &w);
        let cyc = w.gamma1 * v[2] + w.gamma2 * v[3] + w.gamma3 * v[4];
        let total = w.lambda * v[0] + w.lambda * v[1] + cyc;
        worst = worst
            .max((r.l_cyc - cyc).abs())
            .max((r.l_gan - total).abs())
            .max((full_objective(&r, &w) - total).abs());
    }
    check(worst <= 1e-6, format!("(2,1,3) -> 1.1 exactly; worst identity error {worst:.2e} over 1000 reports"))
}

// 2 ------------------------------------------------------------------------

/// A parameter vector sliced into tensors of the given shapes.
struct Params {
    shapes: Vec<Vec<i64>>,
}

impl Params {
    fn len(&self) -> i64 {
        self.shapes.iter().map(|s| s.iter().product::<i64>()).sum()
    }

    fn unpack(&self, theta: &Tensor) -> Vec<Tensor> {
        let mut at = 0;
        self.shapes
            .iter()
            .map(|s| {
                let n: i64 = s.iter().product();
                let t = theta.narrow(0, at, n).view(s.as_slice());
                at += n;
                t
            })
            .collect()
    }
}

/// conv(3x3, same) -> tanh -> conv(3x3, same).
fn two_layer(x: &Tensor, p: &[Tensor]) -> Tensor {
    x.conv2d(&p[0], Some(&p[1]), [1, 1], [1, 1], [1, 1], 1)
        .tanh()
        .conv2d(&p[2], Some(&p[3]), [1, 1], [1, 1], [1, 1], 1)
}

fn conv_shapes(cin: i64, mid: i64, cout: i64) -> Vec<Vec<i64>> {
    vec![vec![mid, cin, 3, 3], vec![mid], vec![cout, mid, 3, 3], vec![cout]]
}

fn random_vec(rng: &mut impl Rng, n: i64, scale: f64) -> Tensor {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_slice(&v)
}

/// Relative error between backprop and central differences on a sample of
/// coordinates of `theta`.
fn grad_error(f: &dyn Fn(&Tensor) -> Tensor, theta: &Tensor, rng: &mut impl Rng) -> f64 {
    let leaf = theta.detach().copy().set_requires_grad(true);
    f(&leaf).backward();
    let analytic = leaf.grad();
    let n = theta.size()[0];
    let step = 1e-4;
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for _ in 0..24 {
        let i = rng.gen_range(0..n);
        let fd = tch::no_grad(|| {
            let plus = theta.copy();
            let _ = plus.get(i).g_add_scalar_(step);
            let minus = theta.copy();
            let _ = minus.get(i).g_add_scalar_(-step);
            (f(&plus).double_value(&[]) - f(&minus).double_value(&[])) / (2.0 * step)
        });
        let a = analytic.double_value(&[i]);
        diff += (a - fd).powi(2);
        na += a * a;
        nf += fd * fd;
    }
    let scale = na.sqrt().max(nf.sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn gradient_checks() -> Verdict {
    tch::manual_seed(0);
    let mut rng = SeedStream::new(2).rng("gradients", 0);
    let kind = Kind::Double;
    let image = |rng: &mut _, n: i64| random_vec(rng, n * 3 * 8 * 8, 1.0).view([n, 3, 8, 8]);
    let g = Params { shapes: conv_shapes(3, 4, 3) };
    let f_net = Params { shapes: conv_shapes(3, 4, 1) };
    let mut worst = [0f64; 4];
    for _ in 0..20 {
        let x = image(&mut rng, 2);
        let xp = image(&mut rng, 2);
        let y = Tensor::from_slice(&[rng.gen_range(0..3i64), rng.gen_range(0..3)]);
        let yp = Tensor::from_slice(&[rng.gen_range(0..3i64), rng.gen_range(0..3)]);
        let phi_w = g.unpack(&random_vec(&mut rng, g.len(), 0.4));
        let h_w = Params { shapes: conv_shapes(3, 4, 3) }.unpack(&random_vec(&mut rng, g.len(), 0.4));
        let phi = move |t: &Tensor| -> ganprotect::Result<Tensor> { Ok(two_layer(t, &phi_w).tanh()) };
        let h = move |t: &Tensor| -> ganprotect::Result<Tensor> {
            Ok(two_layer(t, &h_w).mean_dim([2i64, 3].as_slice(), false, kind))
        };
        let theta_g = random_vec(&mut rng, 2 * g.len(), 0.4);
        let split = |theta: &Tensor| {
            let (a, b) = (theta.narrow(0, 0, g.len()), theta.narrow(0, g.len(), g.len()));
            (g.unpack(&a), g.unpack(&b))
        };

        // Feature loss with respect to the reconstructed image.
        let xhat = image(&mut rng, 2).view([-1]);
        let fl = |t: &Tensor| feature_loss(&phi, &x, &t.view([2, 3, 8, 8])).unwrap();
        worst[0] = worst[0].max(grad_error(&fl, &xhat, &mut rng));

        // Classification loss with respect to both generators.
        let cl = |theta: &Tensor| {
            let (a, b) = split(theta);
            let g_ab = move |t: &Tensor| -> ganprotect::Result<Tensor> { Ok(two_layer(t, &a).tanh()) };
            let g_ba = move |t: &Tensor| -> ganprotect::Result<Tensor> { Ok(two_layer(t, &b).tanh()) };
            classification_loss(&h, &g_ab, &g_ba, &x, &y, &xp, &yp).unwrap()
        };
        worst[1] = worst[1].max(grad_error(&cl, &theta_g, &mut rng));

        // Reconstruction loss with respect to both generators.
        let rl = |theta: &Tensor| {
            let (a, b) = split(theta);
            let g_ab = move |t: &Tensor| -> ganprotect::Result<Tensor> { Ok(two_layer(t, &a).tanh()) };
            let g_ba = move |t: &Tensor| -> ganprotect::Result<Tensor> { Ok(two_layer(t, &b).tanh()) };
            reconstruction_loss(&g_ab, &g_ba, &x, &xp, NormReduction::Mean).unwrap()
        };
        worst[2] = worst[2].max(grad_error(&rl, &theta_g, &mut rng));

        // Adversarial loss: generator term through the fake image, plus the
        // discriminator term with respect to the discriminator.
        let theta_f = random_vec(&mut rng, f_net.len(), 0.4);
        let al = |theta: &Tensor| {
            let (th_g, th_f) = (theta.narrow(0, 0, g.len()), theta.narrow(0, g.len(), f_net.len()));
            let gp = g.unpack(&th_g);
            let fp = f_net.unpack(&th_f);
            let f = move |t: &Tensor| -> ganprotect::Result<Tensor> { Ok(two_layer(t, &fp)) };
            let fake = two_layer(&x, &gp).tanh();
            let (gen, disc) = adversarial_loss(&f, &xp, &fake).unwrap();
            gen + disc * 0.7
        };
        let theta_gf = Tensor::cat(&[theta_g.narrow(0, 0, g.len()), theta_f], 0);
        worst[3] = worst[3].max(grad_error(&al, &theta_gf, &mut rng));
    }
    let names = ["feature", "classification", "reconstruction", "adversarial"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst.iter().all(|w| *w <= 1e-3), format!("worst relative error over 20 instances: {detail}"))
}

// 3 ------------------------------------------------------------------------

fn protection_invariants() -> Verdict {
    let h = ModelHandle::build(&NetworkSpec::resnet18(3).with_width(4).with_seed(3)).map_err(|e| e.to_string())?;
    let mut rng = SeedStream::new(3).rng("protect-invariants", 0);
    let mut worst_excess = f32::NEG_INFINITY;
    let mut out_of_range = 0;
    for _ in 0..1000 {
        let eps = 0.5 - rng.gen_range(0.0..0.5);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let x = ImageTensor::new(3, 8, 8, data, ValueRange::UNIT).unwrap();
        let spec = PerturbationSpec::new(eps);
        let xp = protect_image(&x, rng.gen_range(0..3), &h, &spec).map_err(|e| e.to_string())?;
        worst_excess = worst_excess.max(xp.linf_distance(&x).unwrap() - eps as f32);
        out_of_range += xp.as_slice().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    }
    let batch = synthetic_dataset(&SyntheticSpec::new(3, 64, 8, 4)).unwrap();
    let spec = PerturbationSpec::new(0.3);
    let one = protect_dataset(&batch, &h, &spec, 1).map_err(|e| e.to_string())?;
    let all = protect_dataset(&batch, &h, &spec, 64).map_err(|e| e.to_string())?;
    let batch_gap = one
        .images()
        .zip(all.images())
        .map(|(a, b)| a.linf_distance(b).unwrap())
        .fold(0f32, f32::max);
    check(
        worst_excess <= 1e-6 && out_of_range == 0 && batch_gap <= 1e-6,
        format!(
            "max ‖x_p−x‖∞−ε = {worst_excess:.1e}, {out_of_range} pixels out of range, batch 1 vs 64 gap {batch_gap:.1e}"
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn protection_efficacy() -> Verdict {
    let train = synthetic_dataset(&SyntheticSpec::new(2, 512, 32, 41)).unwrap();
    let test = synthetic_dataset(&SyntheticSpec::new(2, 256, 32, 42)).unwrap();
    let mut cfg = ClassifyConfig::new(NetworkSpec::vgg13_bn(2).with_width(8).with_seed(4));
    cfg.epochs = 6;
    cfg.lr = 0.05;
    cfg.lr_drop_epochs = vec![4];
    cfg.batch_size = 64;
    cfg.seed = 4;
    let (h, _) = train_classifier(&train, None, None, &cfg, None).map_err(|e| e.to_string())?;
    let acc = evaluate_accuracy(&h, &test, None, 128).map_err(|e| e.to_string())?;
    let spec = PerturbationSpec::new(0.3).with_alpha(0.03).with_iterations(50);
    let protected = protect_dataset(&test, &h, &spec, 64).map_err(|e| e.to_string())?;
    let plain_ce = mean_cross_entropy(&h, &test, 128).map_err(|e| e.to_string())?;
    let prot_ce = mean_cross_entropy(&h, &protected, 128).map_err(|e| e.to_string())?;
    check(
        acc >= 0.6 && prot_ce < plain_ce,
        format!("h_theta accuracy {:.1}%, mean CE plain {plain_ce:.4} vs protected {prot_ce:.4} on 256 images", acc * 100.0),
    )
}

// 5 ------------------------------------------------------------------------

/// Direct 2-D evaluation of the windowed statistics, independent of the
/// library's separable filter.
fn reference_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let r = (k / 2) as f64;
    let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            win[i * k + j] = g[i] * g[j] / (s * s);
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let [c, h, w] = a.shape();
    let mut per_channel = 0.0;
    for ch in 0..c {
        let px = |img: &ImageTensor, y: usize, x: usize| img.get(ch, y, x) as f64;
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = win[i * k + j];
                        let (va, vb) = (px(a, y + i, x + j), px(b, y + i, x + j));
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (var_a, var_b, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
        per_channel += total / count as f64;
    }
    per_channel / c as f64
}

fn ssim_oracle() -> Verdict {
    let p = SsimParams::default();
    let mut rng = SeedStream::new(5).rng("ssim", 0);
    let (mut worst_ref, mut worst_sym, mut self_ok) = (0f64, 0f64, true);
    for i in 0..100 {
        let base: Vec<f32> = (0..3 * 96 * 96).map(|_| rng.gen_range(0.0..=1.0)).collect();
        // Mix pure noise with correlated pairs so SSIM spans its range.
        let mix = i as f32 / 100.0;
        let other: Vec<f32> = base
            .iter()
            .map(|v| (mix * v + (1.0 - mix) * rng.gen_range(0.0f32..=1.0)).clamp(0.0, 1.0))
            .collect();
        let a = ImageTensor::new(3, 96, 96, base, ValueRange::UNIT).unwrap();
        let b = ImageTensor::new(3, 96, 96, other, ValueRange::UNIT).unwrap();
        let ab = ssim(&a, &b, &p).map_err(|e| e.to_string())?;
        let ba = ssim(&b, &a, &p).map_err(|e| e.to_string())?;
        worst_ref = worst_ref.max((ab - reference_ssim(&a, &b)).abs());
        worst_sym = worst_sym.max((ab - ba).abs());
        self_ok &= ssim(&a, &a, &p).unwrap() == 1.0;
    }
    check(
        worst_ref <= 1e-6 && worst_sym <= 1e-9 && self_ok,
        format!("max |ssim − reference| {worst_ref:.1e}, max asymmetry {worst_sym:.1e}, ssim(x,x)=1 exactly: {self_ok}"),
    )
}

// 6 ------------------------------------------------------------------------

fn ga_config() -> GaConfig {
    GaConfig {
        epochs: 30,
        seed: 6,
        generator: NetworkSpec::conv_encoder_decoder().with_width(16),
        discriminator: NetworkSpec::att_discriminator().with_width(16),
        ..GaConfig::default()
    }
}

/// 500 training and 100 held-out images at 48x48: STL-10 halved when
/// `GANPROTECT_STL10` is set, synthetic otherwise.
fn ga_data() -> ganprotect::Result<(LabeledDataset, LabeledDataset, &'static str)> {
    match std::env::var_os("GANPROTECT_STL10") {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            let train = load_stl10(&dir, Split::Train)?.select_classes(&(0..10).collect::<Vec<_>>(), Some(500))?.downscale(2)?;
            let test = load_stl10(&dir, Split::Test)?.select_classes(&(0..10).collect::<Vec<_>>(), Some(100))?.downscale(2)?;
            Ok((train, test, "STL-10"))
        }
        None => Ok((
            synthetic_dataset(&SyntheticSpec::new(4, 500, 48, 61))?,
            synthetic_dataset(&SyntheticSpec::new(4, 100, 48, 62))?,
            "synthetic",
        )),
    }
}

fn ga_sanity() -> Verdict {
    let (t, test, source) = ga_data().map_err(|e| e.to_string())?;
    let p = SsimParams::default();
    let cfg = ga_config();
    let id = train_ga(&IdentityScheme, &t, &cfg, None).map_err(|e| e.to_string())?;
    let id_ssim = evaluate_attack(&id.g_att, &IdentityScheme, &test, "ga", &p)
        .map_err(|e| e.to_string())?
        .mean_ssim;
    let shuffle = BlockShuffle::new(4, 6);
    let bs = train_ga(&shuffle, &t, &cfg, None).map_err(|e| e.to_string())?;
    let bs_ssim = evaluate_attack(&bs.g_att, &shuffle, &test, "ga", &p)
        .map_err(|e| e.to_string())?
        .mean_ssim;
    check(
        id_ssim >= 0.6 && bs_ssim < id_ssim,
        format!("{source} 48px, held-out mean SSIM: identity {id_ssim:.4} (need >= 0.6), 4x4 block shuffle {bs_ssim:.4}"),
    )
}

// 7 ------------------------------------------------------------------------

fn toy_chain() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = format!(
        "pipeline = chain
seed = 7
out = {}
data.train = synthetic:2:500:32:71
data.test = synthetic:2:200:32:72
protect.arch = vgg13_bn
protect.width = 8
protect.eps = 0.3
protect.alpha = 0.03
protect.iters = 50
cyclegan.epochs = 200
cyclegan.batch_size = 64
cyclegan.checkpoint_every = 50
cyclegan.generator.width = 8
cyclegan.generator.depth = 3
cyclegan.discriminator.width = 8
cyclegan.features = seeded:16
classify.arch = resnet18
classify.width = 8
classify.epochs = 20
classify.lr_drops = 10,15
classify.batch_size = 64
transform.batch_size = 100
",
        dir.path().display()
    );
    let raw = RawConfig::parse(&text).map_err(|e| format!("{e:?}"))?;
    let cfg = ExperimentConfig::from_raw(&raw).map_err(|e| format!("{e:?}"))?;
    let m = run(&cfg).map_err(|e| e.to_string())?;
    if m.status != RunStatus::Succeeded {
        return Err(format!("chain failed: {:?}", m.error));
    }
    let stages = ["protect", "train-transform", "transform", "classify", "metrics"];
    let all_stages = stages
        .iter()
        .all(|s| m.stages.iter().any(|x| x == s) && m.outputs.iter().any(|o| o.stage == *s));
    let mean = m.summary["metrics.mean_ssim"];
    let acc = m.summary["classify.accuracy"];
    check(
        all_stages && mean < 0.35 && acc >= 0.65,
        format!(
            "mean SSIM(h_p(x), x) {mean:.4}, accuracy on h_p(test) {:.1}% (chance 50%), stages recorded: {all_stages}",
            acc * 100.0
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn write_random(path: &Path, records: usize, record_len: usize, label_at: &[(usize, u8)], rng: &mut impl Rng) {
    let mut bytes = vec![0u8; records * record_len];
    rng.fill(bytes.as_mut_slice());
    for r in 0..records {
        for &(off, classes) in label_at {
            bytes[r * record_len + off] = rng.gen_range(0..classes);
        }
    }
    std::fs::write(path, bytes).unwrap();
}

fn read_at(path: &Path, offset: u64, len: usize) -> Vec<u8> {
    let mut f = std::fs::File::open(path).unwrap();
    f.seek(SeekFrom::Start(offset)).unwrap();
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf).unwrap();
    buf
}

fn byte_of(v: f32) -> u8 {
    (v * 255.0).round() as u8
}

/// Compares ten random records against bytes read straight from the files.
/// `locate` maps an item index to (file, record offset, label offset).
fn spot_check(
    d: &LabeledDataset,
    rng: &mut impl Rng,
    locate: &dyn Fn(usize) -> (PathBuf, u64, u64),
    pixel_offset: &dyn Fn(usize, usize, usize) -> u64,
    label_delta: i64,
) -> bool {
    let [c, h, w] = d.image_shape().unwrap();
    (0..10).all(|_| {
        let i = rng.gen_range(0..d.len());
        let (img, label) = &d.items()[i];
        let (file, rec, lab) = locate(i);
        let raw_label = read_at(&PathBuf::from(&file), lab, 1)[0] as i64 + label_delta;
        let raw = read_at(&file, rec, c * h * w);
        let mut ok = raw_label == *label as i64;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    ok &= raw[pixel_offset(ch, y, x) as usize] == byte_of(img.get(ch, y, x));
                }
            }
        }
        ok
    })
}

fn dataset_loaders() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = SeedStream::new(8).rng("loaders", 0);
    let mut notes = Vec::new();
    let mut ok = true;

    let c10 = std::env::var_os("GANPROTECT_CIFAR10").map(PathBuf::from).unwrap_or_else(|| {
        let d = tmp.path().join("cifar-10-batches-bin");
        std::fs::create_dir_all(&d).unwrap();
        for i in 1..=5 {
            write_random(&d.join(format!("data_batch_{i}.bin")), 10_000, 3073, &[(0, 10)], &mut rng);
        }
        write_random(&d.join("test_batch.bin"), 10_000, 3073, &[(0, 10)], &mut rng);
        d
    });
    let cifar_px = |c: usize, y: usize, x: usize| (c * 1024 + y * 32 + x) as u64;
    for (split, n) in [(Split::Train, 50_000), (Split::Test, 10_000)] {
        let d = load_cifar10(&c10, split).map_err(|e| e.to_string())?;
        let dir = c10.clone();
        let locate = move |i: usize| {
            let (file, r) = match split {
                Split::Train => (format!("data_batch_{}.bin", i / 10_000 + 1), i % 10_000),
                Split::Test => ("test_batch.bin".to_string(), i),
            };
            let base = (r * 3073) as u64;
            (dir.join(file), base + 1, base)
        };
        let good = d.len() == n && spot_check(&d, &mut rng, &locate, &cifar_px, 0);
        notes.push(format!("cifar10 {split:?} {}", d.len()));
        ok &= good;
    }

    let c100 = std::env::var_os("GANPROTECT_CIFAR100").map(PathBuf::from).unwrap_or_else(|| {
        let d = tmp.path().join("cifar-100-binary");
        std::fs::create_dir_all(&d).unwrap();
        write_random(&d.join("train.bin"), 50_000, 3074, &[(0, 20), (1, 100)], &mut rng);
        write_random(&d.join("test.bin"), 10_000, 3074, &[(0, 20), (1, 100)], &mut rng);
        d
    });
    for (split, n, file) in [(Split::Train, 50_000, "train.bin"), (Split::Test, 10_000, "test.bin")] {
        let d = load_cifar100(&c100, split).map_err(|e| e.to_string())?;
        let path = c100.join(file);
        let locate = move |i: usize| {
            let base = (i * 3074) as u64;
            (path.clone(), base + 2, base + 1)
        };
        ok &= d.len() == n && spot_check(&d, &mut rng, &locate, &cifar_px, 0);
        notes.push(format!("cifar100 {split:?} {}", d.len()));
    }

    let stl = std::env::var_os("GANPROTECT_STL10").map(PathBuf::from).unwrap_or_else(|| {
        let d = tmp.path().join("stl10_binary");
        std::fs::create_dir_all(&d).unwrap();
        for (split, n) in [("train", 5_000), ("test", 8_000)] {
            write_random(&d.join(format!("{split}_X.bin")), n, 27_648, &[], &mut rng);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(1..=10)).collect();
            std::fs::write(d.join(format!("{split}_y.bin")), labels).unwrap();
        }
        d
    });
    for (split, n, name) in [(Split::Train, 5_000, "train"), (Split::Test, 8_000, "test")] {
        let d = load_stl10(&stl, split).map_err(|e| e.to_string())?;
        let ys = stl.join(format!("{name}_y.bin"));
        let labels = std::fs::read(&ys).unwrap();
        let label_ok = d.labels().iter().zip(&labels).all(|(l, b)| *l as i64 == *b as i64 - 1);
        let px_ok = stl_pixels_match(&d, &stl.join(format!("{name}_X.bin")), &mut rng);
        ok &= d.len() == n && label_ok && px_ok;
        notes.push(format!("stl10 {split:?} {}", d.len()));
    }
    check(ok, format!("counts {}; 10 random records per split byte-identical", notes.join(", ")))
}

fn stl_pixels_match(d: &LabeledDataset, xs: &Path, rng: &mut impl Rng) -> bool {
    (0..10).all(|_| {
        let i = rng.gen_range(0..d.len());
        let raw = read_at(xs, (i * 27_648) as u64, 27_648);
        let img = &d.items()[i].0;
        (0..3).all(|c| {
            (0..96).all(|y| (0..96).all(|x| raw[c * 9216 + x * 96 + y] == byte_of(img.get(c, y, x))))
        })
    })
}

// 9 ------------------------------------------------------------------------

fn determinism_and_resume() -> Verdict {
    let x = synthetic_dataset(&SyntheticSpec::new(2, 24, 16, 91)).unwrap();
    let p = synthetic_dataset(&SyntheticSpec::new(2, 24, 16, 92)).unwrap();
    let h = ModelHandle::build(&NetworkSpec::vgg13_bn(2).with_width(4).with_seed(9)).unwrap();
    let phi = ModelHandle::build(&NetworkSpec::vgg16_features_seeded(4, 9)).unwrap();
    let cfg = CycleGanConfig {
        epochs: 6,
        batch_size: 8,
        seed: 9,
        checkpoint_every: 3,
        replay_pool: 8,
        generator: NetworkSpec::unet_generator().with_width(4).with_depth(3),
        discriminator: NetworkSpec::patch_discriminator().with_width(4).with_depth(2),
        ..CycleGanConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = train_cyclegan(&x, &p, &h, &phi, &cfg, Some(dir.path())).map_err(|e| e.to_string())?;
    let b = train_cyclegan(&x, &p, &h, &phi, &cfg, None).map_err(|e| e.to_string())?;
    let same = a.reports == b.reports && a.nets.g_ab.checksum() == b.nets.g_ab.checksum();
    let ck = dir.path().join("ckpt-00003.safetensors");
    let resumed = CycleGanTrainer::resume(&ck, &x, &p, &h, &phi, &cfg, None)
        .and_then(|t| t.train())
        .map_err(|e| e.to_string())?;
    let tail = a.reports.len() / 2;
    let resumed_ok = resumed.reports == a.reports[tail..]
        && resumed.nets.g_ab.checksum() == a.nets.g_ab.checksum()
        && resumed.nets.f_b.checksum() == a.nets.f_b.checksum();
    check(
        same && resumed_ok,
        format!(
            "{} reports identical across runs: {same}; resume from epoch 3 reproduces the last {} reports and weights: {resumed_ok}",
            a.reports.len(),
            a.reports.len() - tail
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn lr_schedules() -> Verdict {
    let cc = ClassifyConfig::new(NetworkSpec::resnet18(10));
    let s = cc.schedule().map_err(|e| e.to_string())?;
    let want = [(0, 0.1), (60, 0.02), (120, 0.004), (160, 0.0008)];
    let classify_ok = want.iter().all(|(e, lr)| (s.lr(*e) - lr).abs() <= 1e-12 * lr);
    // Every epoch between the listed ones keeps the previous rate.
    let steps_ok = (1..200).all(|e| {
        let changed = s.lr(e) != s.lr(e - 1);
        changed == [60, 120, 160].contains(&e)
    });

    let pc = ganprotect::attacks::PairedConfig::default();
    let ps = pc.schedule().map_err(|e| e.to_string())?;
    let drops: Vec<usize> = (1..pc.epochs).filter(|e| ps.lr(*e) != ps.lr(e - 1)).collect();
    let factor_ok = drops.iter().all(|e| ((ps.lr(e - 1) / ps.lr(*e)) - 10.0).abs() <= 1e-9);

    // The trainer records the rate it used for each epoch.
    let tiny = synthetic_dataset(&SyntheticSpec::new(2, 4, 8, 10)).unwrap();
    let pairs: Vec<(ImageTensor, ImageTensor)> =
        tiny.images().map(|i| (i.clone(), i.clone())).collect();
    let cfg = ganprotect::attacks::PairedConfig {
        batch_size: 4,
        generator: NetworkSpec::conv_encoder_decoder().with_width(2).with_depth(1),
        ..pc.clone()
    };
    let (_, hist) = ganprotect::attacks::train_paired_attack(&pairs, &cfg, None).map_err(|e| e.to_string())?;
    let used_ok = hist.iter().all(|r| r.lr == ps.lr(r.epoch)) && hist.len() == pc.epochs;
    check(
        classify_ok && steps_ok && drops == [40, 60] && factor_ok && used_ok,
        format!(
            "classify rates at 0/60/120/160: {:?}; paired drops at {drops:?} by 10x; trainer followed schedule: {used_ok}",
            want.iter().map(|(e, _)| s.lr(*e)).collect::<Vec<_>>()
        ),
    )
}

const CRITERIA: [(u32, &str, fn() -> Verdict); 10] = [
    (1, "loss algebra", loss_algebra),
    (2, "gradient checks", gradient_checks),
    (3, "protection invariants", protection_invariants),
    (4, "protection efficacy", protection_efficacy),
    (5, "SSIM oracle equivalence", ssim_oracle),
    (6, "GA sanity", ga_sanity),
    (7, "toy end-to-end chain", toy_chain),
    (8, "dataset loaders", dataset_loaders),
    (9, "determinism and resume", determinism_and_resume),
    (10, "learning-rate schedules", lr_schedules),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    tch::set_num_threads(1);
    let mut failed = 0;
    for (n, name, f) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS  {n:>2} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {n:>2} {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
