use dct::adaptation::{adapt_stream, pretrain, AdaptConfig, AdaptMode, PretrainConfig};
use dct::data::{gen_synthetic_dataset, CorruptionKind, CorruptionSpec, StreamBatch};
use dct::model::ModelConfig;
use dct::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

type Corruptor = Box<dyn Fn(&[f32], &mut StdRng) -> Vec<f32>>;

fn blur5(img: &[f32], side: usize) -> Vec<f32> {
    let r = 2isize;
    let mut out = Vec::with_capacity(side*side);
    for y in 0..side as isize { for x in 0..side as isize { let mut a = 0.0f64;
        for dy in -r..=r { for dx in -r..=r {
            let yy=(y+dy).clamp(0,side as isize-1) as usize; let xx=(x+dx).clamp(0,side as isize-1) as usize;
            a += img[yy*side+xx] as f64; }}
        out.push((a/25.0) as f32); }}
    out
}
fn pix2(img: &[f32], side: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; side*side]; let mut by = 0;
    while by < side { let mut bx = 0; while bx < side {
        let mut a = 0.0f64;
        for y in by..by+2 { for x in bx..bx+2 { a += img[y*side+x] as f64; }}
        let m = (a/4.0) as f32;
        for y in by..by+2 { for x in bx..bx+2 { out[y*side+x] = m; }}
        bx += 2; } by += 2; }
    out
}
fn corruptors() -> Vec<(&'static str, Corruptor)> {
    vec![
        ("gauss", Box::new(|i: &[f32], r: &mut StdRng| { let n=Normal::new(0.0,0.26).unwrap(); i.iter().map(|&v| ((v as f64+n.sample(r)).clamp(0.0,1.0)) as f32).collect() })),
        ("impulse", Box::new(|i: &[f32], r: &mut StdRng| i.iter().map(|&v| if r.gen::<f64>()<0.13 { if r.gen::<f64>()<0.5 {0.0} else {1.0} } else {v}).collect())),
        ("blur", Box::new(move |i: &[f32], _: &mut StdRng| { let b=blur5(i,16); i.iter().zip(&b).map(|(&o,&bv)| (0.3*o as f64+0.7*bv as f64) as f32).collect() })),
        ("contrast", Box::new(|i: &[f32], _: &mut StdRng| i.iter().map(|&v| 0.5+0.5*(v-0.5)).collect())),
        ("bright", Box::new(|i: &[f32], _: &mut StdRng| i.iter().map(|&v| (v as f64+0.3*(1.0-v as f64)) as f32).collect())),
        ("pix", Box::new(move |i: &[f32], _: &mut StdRng| { let b=pix2(i,16); i.iter().zip(&b).map(|(&o,&bv)| (0.1*o as f64+0.9*bv as f64) as f32).collect() })),
    ]
}
fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() { let j = rng.gen_range(0..=i); order.swap(i, j); }
    order
}
fn stream_from_order(test: &dct::data::SyntheticDataset, order: &[usize], f: &dyn Fn(&[f32], &mut StdRng) -> Vec<f32>, seed: u64, bs: usize) -> Vec<StreamBatch> {
    let side = test.image_size; let px = side*side;
    let mut crng = StdRng::seed_from_u64(seed ^ 0xABC);
    order.chunks(bs).enumerate().map(|(bi, chunk)| {
        let mut data = Vec::with_capacity(chunk.len()*px);
        let mut labels = Vec::new(); let mut ids = Vec::new();
        for &i in chunk { data.extend(f(test.image(i), &mut crng)); labels.push(test.labels[i]); ids.push(i as u32); }
        StreamBatch { index: bi, images: Tensor::new(vec![chunk.len(), side, side, 1], data).unwrap(),
            labels, ids, corruption: CorruptionSpec::new(CorruptionKind::GaussianNoise, 5).unwrap() }
    }).collect()
}

fn main() {
    let cfg = ModelConfig { image_size: 16, patch_size: 4, embed_dim: 32, num_heads: 4, depth: 4, mlp_ratio: 4.0, num_classes: 10 };
    let (train, test) = gen_synthetic_dataset(10, 200, 100, 16, 1).unwrap();
    let pcfg = PretrainConfig { epochs: 3, lr: 0.05, momentum: 0.9, batch_size: 64, label_smoothing: 0.1, augment: false, seed: Some(1) };
    let (params, _) = pretrain(&cfg, &train, &pcfg).unwrap();
    let variants: [(f32, f32, f32); 3] = [(0.4, 0.2, 0.3), (0.4, 0.2, 1.0), (0.6, 0.15, 0.3)];
    for (e0f, lr, gs) in variants {
        let mut ge_l = 0;
        let mut lines = Vec::new();
        for (name, f) in &corruptors() {
            let order = shuffled_order(test.len(), 11);
            let stream = stream_from_order(&test, &order, f.as_ref(), 11, 1);
            let base = AdaptConfig { learning_rate: lr, rho: 0.05, e0_factor: e0f, ..Default::default() };
            let mut pd = params.clone();
            let d = adapt_stream(&mut pd, &stream, &AdaptConfig { mode: AdaptMode::Dct, generator_lr_scale: gs, ..base.clone() }).unwrap();
            let mut pl = params.clone();
            let l = adapt_stream(&mut pl, &stream, &AdaptConfig { mode: AdaptMode::LnOnly, ..base.clone() }).unwrap();
            if d.final_accuracy >= l.final_accuracy { ge_l += 1; }
            lines.push(format!("{name} d={:.3} l={:.3} ({:+.1})", d.final_accuracy, l.final_accuracy, (d.final_accuracy-l.final_accuracy)*100.0));
        }
        println!("e0f={e0f} lr={lr} gs={gs}: d>=l {ge_l}/6 | {}", lines.join(" | "));
    }
}
