#![allow(dead_code)]

use aro_core::rng::SplitMix64;
use aro_core::trainer::{loss_forward, loss_gradient, ContrastiveBatch, Head, HeadKind, ProjectionModel, Provenance};
use ndarray::Array2;

pub fn gaussian(rng: &mut SplitMix64, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.normal())
}

pub fn random_batch(rng: &mut SplitMix64, n: usize, d_in: usize, with_negs: bool) -> ContrastiveBatch {
    ContrastiveBatch {
        image_vecs: gaussian(rng, n, d_in),
        caption_vecs: gaussian(rng, n, d_in),
        neg_caption_vecs: with_negs.then(|| gaussian(rng, n, d_in)),
        provenance: vec![Provenance::Base; n],
    }
}

pub fn random_model(rng: &mut SplitMix64, kind: HeadKind, d_in: usize, d_out: usize) -> ProjectionModel {
    let mut m = ProjectionModel::init(kind, d_in, d_out, rng);
    if let Head::Mlp { b1, .. } = &mut m.img {
        b1.mapv_inplace(|_| 0.1 * rng.normal());
    }
    if let Head::Mlp { b1, .. } = &mut m.txt {
        b1.mapv_inplace(|_| 0.1 * rng.normal());
    }
    m.logit_scale = 0.5 + 2.0 * rng.next_f64();
    m
}

fn project(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d_out = w[0].len();
    let mut z = vec![0.0; d_out];
    for (i, xi) in x.iter().enumerate() {
        for (o, zo) in z.iter_mut().enumerate() {
            *zo += xi * w[i][o];
        }
    }
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    z.iter().map(|v| v / n).collect()
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let total: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[target].exp() / total).ln()
}

/// Direct scalar evaluation of the masked-column objective for linear heads.
pub fn scalar_loss(model: &ProjectionModel, batch: &ContrastiveBatch) -> f64 {
    let (Head::Linear { w: wi }, Head::Linear { w: wt }) = (&model.img, &model.txt) else {
        panic!("scalar oracle handles linear heads only");
    };
    let (wi, wt) = (rows(wi), rows(wt));
    let scale = model.logit_scale.exp().min(100.0);
    let imgs: Vec<Vec<f64>> = rows(&batch.image_vecs).iter().map(|x| project(&wi, x)).collect();
    let mut texts: Vec<Vec<f64>> = rows(&batch.caption_vecs).iter().map(|x| project(&wt, x)).collect();
    if let Some(neg) = &batch.neg_caption_vecs {
        texts.extend(rows(neg).iter().map(|x| project(&wt, x)));
    }
    let n = imgs.len();
    let logit = |i: usize, t: usize| scale * imgs[i].iter().zip(&texts[t]).map(|(a, b)| a * b).sum::<f64>();

    let mut i2t = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..texts.len()).map(|t| logit(i, t)).collect();
        i2t += cross_entropy(&row, i);
    }
    let mut t2i = 0.0;
    for t in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logit(i, t)).collect();
        t2i += cross_entropy(&col, t);
    }
    (i2t / n as f64 + t2i / n as f64) / 2.0
}

fn flat(model: &ProjectionModel) -> Vec<f64> {
    model.blocks().iter().flat_map(|b| b.values.to_vec()).collect()
}

fn with_param(model: &ProjectionModel, index: usize, delta: f64) -> ProjectionModel {
    let mut m = model.clone();
    let mut offset = 0;
    for b in m.blocks_mut() {
        if index < offset + b.values.len() {
            b.values[index - offset] += delta;
            break;
        }
        offset += b.values.len();
    }
    m
}

/// Largest relative disagreement between the analytic gradient and central
/// differences with step `h`, over every parameter.
pub fn max_fd_relative_error(model: &ProjectionModel, batch: &ContrastiveBatch, h: f64) -> f64 {
    let (_, grad) = loss_gradient(model, batch).unwrap();
    let analytic = flat(&grad);
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let up = loss_forward(&with_param(model, i, h), batch).unwrap().loss;
        let down = loss_forward(&with_param(model, i, -h), batch).unwrap().loss;
        let fd = (up - down) / (2.0 * h);
        let denom = a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((a - fd).abs() / denom);
    }
    worst
}
