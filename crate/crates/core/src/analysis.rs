//! Attention analytics and metric aggregation.
//!
//! Attention distance weighs the pixel distance between patch centers by the
//! attention each query patch pays to each key patch, yielding a per-layer
//! receptive-field proxy. Class-token and conditioner rows/columns carry no
//! pixel geometry, so they are dropped and the remaining rows renormalized
//! before the distance sum. The same restrict-and-renormalize step feeds
//! attention rollout.

use crate::data::StreamBatch;
use crate::error::{DctError, DctResult};
use crate::graph::Graph;
use crate::model::{
    bind_frozen, model_forward, AttentionRecord, ForwardMode, ModelParams, TraceOptions,
};
use crate::tensor::Tensor;

/// Patch-token geometry: pixel centers of the N patch tokens and their
/// pairwise Euclidean distances.
#[derive(Clone, Debug)]
pub struct TokenGeometry {
    pub grid_side: usize,
    pub patch_size: usize,
    distances: Vec<f64>,
}

impl TokenGeometry {
    pub fn new(grid_side: usize, patch_size: usize) -> Self {
        let n = grid_side * grid_side;
        let center = |t: usize| -> (f64, f64) {
            let row = (t / grid_side) as f64;
            let col = (t % grid_side) as f64;
            (
                (col + 0.5) * patch_size as f64,
                (row + 0.5) * patch_size as f64,
            )
        };
        let mut distances = vec![0.0; n * n];
        for i in 0..n {
            let (xi, yi) = center(i);
            for j in 0..n {
                let (xj, yj) = center(j);
                distances[i * n + j] = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
            }
        }
        TokenGeometry { grid_side, patch_size, distances }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.num_patches() + j]
    }

    pub fn max_distance(&self) -> f64 {
        self.distances.iter().cloned().fold(0.0, f64::max)
    }
}

/// Restrict a square attention matrix to its patch-token block (dropping the
/// class row/column and, when present, the conditioner row/column) and
/// renormalize each row to sum 1. Rows with no remaining mass become uniform.
fn patch_block(weights: &Tensor, includes_conditioner: bool, n_patches: usize) -> DctResult<Vec<f64>> {
    let m = weights.rows();
    let expected = n_patches + 1 + usize::from(includes_conditioner);
    if weights.cols() != m || m != expected {
        return Err(DctError::DimMismatch {
            op: "patch_block",
            detail: format!(
                "weight matrix {:?} does not match {n_patches} patches (expected side {expected})",
                weights.shape()
            ),
        });
    }
    let mut block = vec![0.0f64; n_patches * n_patches];
    for i in 0..n_patches {
        let mut sum = 0.0f64;
        for j in 0..n_patches {
            let w = weights.get2(i + 1, j + 1) as f64;
            block[i * n_patches + j] = w;
            sum += w;
        }
        if sum > 1e-12 {
            for j in 0..n_patches {
                block[i * n_patches + j] /= sum;
            }
        } else {
            for j in 0..n_patches {
                block[i * n_patches + j] = 1.0 / n_patches as f64;
            }
        }
    }
    Ok(block)
}

/// Mean attention distance in pixels, one value per head. With `raw_sum` the
/// plain double sum is returned instead of the per-query mean.
pub fn attention_distance(
    record: &AttentionRecord,
    geom: &TokenGeometry,
    raw_sum: bool,
) -> DctResult<Vec<f64>> {
    if record.grid.side != geom.grid_side || record.grid.patch_size != geom.patch_size {
        return Err(DctError::DimMismatch {
            op: "attention_distance",
            detail: format!(
                "record grid {}x{} (patch {}) vs geometry {}x{} (patch {})",
                record.grid.side,
                record.grid.side,
                record.grid.patch_size,
                geom.grid_side,
                geom.grid_side,
                geom.patch_size
            ),
        });
    }
    let n = geom.num_patches();
    let mut out = Vec::with_capacity(record.heads.len());
    for head in &record.heads {
        let block = patch_block(&head.weights, record.includes_conditioner, n)?;
        let mut acc = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                acc += block[i * n + j] * geom.distance(i, j);
            }
        }
        out.push(if raw_sum { acc } else { acc / n as f64 });
    }
    Ok(out)
}

/// Per-layer attention-distance profile averaged over a sample set.
#[derive(Clone, Debug)]
pub struct AttentionProfile {
    /// `[layer][head]` mean distances.
    pub per_layer_head: Vec<Vec<f64>>,
    /// Head-averaged distance per layer.
    pub per_layer_mean: Vec<f64>,
}

/// Average attention distances over samples; `samples[s]` holds one record
/// per layer for sample `s`.
pub fn profile(samples: &[Vec<AttentionRecord>], geom: &TokenGeometry) -> DctResult<AttentionProfile> {
    let first = samples.first().ok_or_else(|| DctError::DimMismatch {
        op: "profile",
        detail: "need at least one sample".into(),
    })?;
    let layers = first.len();
    let heads = first.first().map_or(0, |r| r.heads.len());
    let mut acc = vec![vec![0.0f64; heads]; layers];
    for sample in samples {
        if sample.len() != layers {
            return Err(DctError::DimMismatch {
                op: "profile",
                detail: "samples disagree on layer count".into(),
            });
        }
        for (l, record) in sample.iter().enumerate() {
            let d = attention_distance(record, geom, false)?;
            for (h, v) in d.iter().enumerate() {
                acc[l][h] += v;
            }
        }
    }
    let count = samples.len() as f64;
    for row in acc.iter_mut() {
        for v in row.iter_mut() {
            *v /= count;
        }
    }
    let per_layer_mean = acc
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
        .collect();
    Ok(AttentionProfile { per_layer_head: acc, per_layer_mean })
}

/// Class-token saliency over patch tokens via attention rollout.
#[derive(Clone, Debug)]
pub struct RolloutSaliency {
    /// One weight per patch token, summing to 1.
    pub saliency: Vec<f64>,
    /// Set when the class row carried no patch mass and a uniform fallback
    /// was returned.
    pub degenerate: bool,
}

/// Head-average each layer, drop the conditioner row/column, renormalize,
/// mix with identity (1/2 each), and multiply the chain from layer 1 up.
/// Returns the class-token row restricted to patch tokens, renormalized.
pub fn attention_rollout(records: &[AttentionRecord]) -> DctResult<RolloutSaliency> {
    let first = records.first().ok_or_else(|| DctError::DimMismatch {
        op: "attention_rollout",
        detail: "need at least one layer".into(),
    })?;
    let n = first.grid.side * first.grid.side + 1; // class + patches
    let mut rollout = vec![0.0f64; n * n];
    for i in 0..n {
        rollout[i * n + i] = 1.0;
    }
    for record in records {
        let m = n + usize::from(record.includes_conditioner);
        let heads = record.heads.len();
        // head average over the n x n token block
        let mut avg = vec![0.0f64; n * n];
        for head in &record.heads {
            let w = &head.weights;
            if w.rows() != m || w.cols() != m {
                return Err(DctError::DimMismatch {
                    op: "attention_rollout",
                    detail: format!("layer {} weights {:?}, expected side {m}", record.layer, w.shape()),
                });
            }
            for i in 0..n {
                for j in 0..n {
                    avg[i * n + j] += w.get2(i, j) as f64 / heads as f64;
                }
            }
        }
        // renormalize rows (mass lost to the dropped conditioner column)
        for i in 0..n {
            let sum: f64 = avg[i * n..(i + 1) * n].iter().sum();
            if sum > 1e-12 {
                for j in 0..n {
                    avg[i * n + j] /= sum;
                }
            } else {
                for j in 0..n {
                    avg[i * n + j] = 1.0 / n as f64;
                }
            }
        }
        // A_hat = 1/2 A + 1/2 I, then rollout = A_hat * rollout
        let mut next = vec![0.0f64; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = 0.5 * avg[i * n + k] + if i == k { 0.5 } else { 0.0 };
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += a * rollout[k * n + j];
                }
            }
        }
        rollout = next;
    }
    let patches = n - 1;
    let class_row = &rollout[1..n];
    let sum: f64 = class_row.iter().sum();
    if sum > 1e-12 {
        Ok(RolloutSaliency {
            saliency: class_row.iter().map(|v| v / sum).collect(),
            degenerate: false,
        })
    } else {
        Ok(RolloutSaliency {
            saliency: vec![1.0 / patches as f64; patches],
            degenerate: true,
        })
    }
}

// ── embedding export ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedWhat {
    /// Class token after each block.
    ClassTokens,
    /// Concatenated (Cq, Ck, Cv) per layer.
    Conditioners,
}

#[derive(Clone, Debug)]
pub struct EmbeddingRow {
    pub sample_id: u32,
    pub domain: String,
    pub label: u32,
    pub layer: usize,
    pub features: Vec<f32>,
}

/// One row per (sample, layer) with the requested feature vector.
pub fn export_embeddings(
    params: &ModelParams,
    batches: &[StreamBatch],
    what: EmbedWhat,
    mode: ForwardMode,
) -> DctResult<Vec<EmbeddingRow>> {
    if what == EmbedWhat::Conditioners && mode == ForwardMode::Baseline {
        return Err(DctError::InvalidMode {
            message: "conditioner export requires a conditioned forward mode".into(),
        });
    }
    let trace = match what {
        EmbedWhat::ClassTokens => TraceOptions { class_tokens: true, ..TraceOptions::none() },
        EmbedWhat::Conditioners => TraceOptions { conditioners: true, ..TraceOptions::none() },
    };
    let mut rows = Vec::new();
    for batch in batches {
        let mut g = Graph::new();
        let bound = bind_frozen(&mut g, params);
        let fwd = model_forward(&mut g, &batch.images, &bound, mode, trace)?;
        for (s, tr) in fwd.traces.iter().enumerate() {
            match what {
                EmbedWhat::ClassTokens => {
                    for (l, tok) in tr.class_tokens.iter().enumerate() {
                        rows.push(EmbeddingRow {
                            sample_id: batch.ids[s],
                            domain: batch.corruption.kind.name().into(),
                            label: batch.labels[s],
                            layer: l,
                            features: tok.data().to_vec(),
                        });
                    }
                }
                EmbedWhat::Conditioners => {
                    for (l, c) in tr.conditioners.iter().enumerate() {
                        let mut features = c.cq.data().to_vec();
                        features.extend_from_slice(c.ck.data());
                        features.extend_from_slice(c.cv.data());
                        rows.push(EmbeddingRow {
                            sample_id: batch.ids[s],
                            domain: batch.corruption.kind.name().into(),
                            label: batch.labels[s],
                            layer: l,
                            features,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct RolloutRow {
    pub sample_id: u32,
    pub domain: String,
    pub label: u32,
    pub degenerate: bool,
    pub saliency: Vec<f64>,
}

/// Rollout saliency for every sample in the batches.
pub fn export_rollout(
    params: &ModelParams,
    batches: &[StreamBatch],
    mode: ForwardMode,
) -> DctResult<Vec<RolloutRow>> {
    let trace = TraceOptions { attention: true, ..TraceOptions::none() };
    let mut rows = Vec::new();
    for batch in batches {
        let mut g = Graph::new();
        let bound = bind_frozen(&mut g, params);
        let fwd = model_forward(&mut g, &batch.images, &bound, mode, trace)?;
        for (s, tr) in fwd.traces.iter().enumerate() {
            let roll = attention_rollout(&tr.attention)?;
            rows.push(RolloutRow {
                sample_id: batch.ids[s],
                domain: batch.corruption.kind.name().into(),
                label: batch.labels[s],
                degenerate: roll.degenerate,
                saliency: roll.saliency,
            });
        }
    }
    Ok(rows)
}

// ── running metrics ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub batch_idx: usize,
    pub n_samples: usize,
    pub n_selected_pass1: usize,
    pub n_selected_pass2: usize,
    /// Adaptation loss of the scoring pass; absent when no sample survived
    /// the reliability filter.
    pub loss: Option<f32>,
    pub batch_accuracy: f64,
    pub running_accuracy: f64,
    pub skipped: bool,
}

/// Accumulates per-batch outcomes in stream order. Skipped batches still
/// count their samples in the accuracy denominator.
#[derive(Default)]
pub struct RunningMetrics {
    rows: Vec<MetricsRow>,
    total_seen: usize,
    total_correct: usize,
}

impl RunningMetrics {
    pub fn new() -> Self {
        RunningMetrics::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        batch_idx: usize,
        n_samples: usize,
        n_correct: usize,
        n_selected_pass1: usize,
        n_selected_pass2: usize,
        loss: Option<f32>,
        skipped: bool,
    ) -> &MetricsRow {
        self.total_seen += n_samples;
        self.total_correct += n_correct;
        self.rows.push(MetricsRow {
            batch_idx,
            n_samples,
            n_selected_pass1,
            n_selected_pass2,
            loss,
            batch_accuracy: n_correct as f64 / n_samples.max(1) as f64,
            running_accuracy: self.total_correct as f64 / self.total_seen.max(1) as f64,
            skipped,
        });
        self.rows.last().unwrap()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn running_accuracy(&self) -> f64 {
        self.total_correct as f64 / self.total_seen.max(1) as f64
    }

    pub fn skipped_batches(&self) -> usize {
        self.rows.iter().filter(|r| r.skipped).count()
    }

    pub fn into_rows(self) -> Vec<MetricsRow> {
        self.rows
    }
}

// ── CSV serialization ────────────────────────────────────────────────

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "batch_idx,n_samples,n_selected_pass1,n_selected_pass2,loss,batch_accuracy,running_accuracy,skipped\n",
    );
    for r in rows {
        let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.batch_idx,
            r.n_samples,
            r.n_selected_pass1,
            r.n_selected_pass2,
            loss,
            r.batch_accuracy,
            r.running_accuracy,
            r.skipped
        ));
    }
    out
}

pub fn profile_csv(profiles: &[(u8, AttentionProfile)]) -> String {
    let mut out = String::from("severity,layer,head,mean_distance\n");
    for (severity, p) in profiles {
        for (l, heads) in p.per_layer_head.iter().enumerate() {
            for (h, d) in heads.iter().enumerate() {
                out.push_str(&format!("{severity},{l},{h},{d}\n"));
            }
        }
    }
    out
}

pub fn embed_csv(rows: &[EmbeddingRow]) -> String {
    let width = rows.first().map_or(0, |r| r.features.len());
    let mut out = String::from("sample_id,domain,label,layer");
    for i in 0..width {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.sample_id, r.domain, r.label, r.layer));
        for f in &r.features {
            out.push_str(&format!(",{f}"));
        }
        out.push('\n');
    }
    out
}

pub fn rollout_csv(rows: &[RolloutRow]) -> String {
    let width = rows.first().map_or(0, |r| r.saliency.len());
    let mut out = String::from("sample_id,domain,label,degenerate");
    for i in 0..width {
        out.push_str(&format!(",s{i}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.sample_id, r.domain, r.label, r.degenerate));
        for s in &r.saliency {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadRecord, TokenGrid};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn record(weights: Tensor, includes_conditioner: bool, grid_side: usize) -> AttentionRecord {
        AttentionRecord {
            layer: 0,
            heads: vec![HeadRecord { weights: weights.clone(), scores: weights }],
            includes_conditioner,
            grid: TokenGrid { side: grid_side, patch_size: 4 },
        }
    }

    fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0f32; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_parts(vec![n, n], data)
    }

    #[test]
    fn geometry_is_symmetric_with_zero_diagonal() {
        let geom = TokenGeometry::new(3, 4);
        for i in 0..9 {
            assert_eq!(geom.distance(i, i), 0.0);
            for j in 0..9 {
                assert_eq!(geom.distance(i, j), geom.distance(j, i));
            }
        }
        // adjacent horizontal neighbours are one patch apart
        assert!((geom.distance(0, 1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn identity_attention_has_zero_distance() {
        let geom = TokenGeometry::new(2, 4);
        let rec = record(eye(5), false, 2);
        let d = attention_distance(&rec, &geom, false).unwrap();
        assert_eq!(d, vec![0.0]);
    }

    #[test]
    fn uniform_attention_on_2x2_grid_matches_brute_force() {
        let geom = TokenGeometry::new(2, 4);
        let rec = record(Tensor::filled(vec![5, 5], 0.2), false, 2);
        let d = attention_distance(&rec, &geom, false).unwrap();
        // brute force over all 16 patch pairs with c_ij = 1/4
        let mut expect = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                expect += 0.25 * geom.distance(i, j);
            }
        }
        expect /= 4.0;
        assert!((d[0] - expect).abs() < 1e-9);
        assert!((d[0] - 3.4142).abs() < 1e-3);
        // raw-sum variant skips the 1/N normalization
        let raw = attention_distance(&rec, &geom, true).unwrap();
        assert!((raw[0] - expect * 4.0).abs() < 1e-9);
    }

    #[test]
    fn farthest_token_attention_hits_max_distance() {
        let geom = TokenGeometry::new(2, 4);
        // patch token i attends solely to the farthest patch (diagonal mate)
        let far = [3usize, 2, 1, 0];
        let mut w = vec![0.0f32; 25];
        for i in 0..4 {
            w[(i + 1) * 5 + (far[i] + 1)] = 1.0;
        }
        let rec = record(Tensor::from_parts(vec![5, 5], w), false, 2);
        let d = attention_distance(&rec, &geom, false).unwrap();
        assert!((d[0] - geom.max_distance()).abs() < 1e-9);
    }

    #[test]
    fn distance_of_row_stochastic_matrix_stays_in_range() {
        let geom = TokenGeometry::new(3, 4);
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let mut w = vec![0.0f32; 10 * 10];
            for r in 0..10 {
                let raw: Vec<f32> = (0..10).map(|_| rng.gen_range(0.0f32..1.0)).collect();
                let s: f32 = raw.iter().sum();
                for c in 0..10 {
                    w[r * 10 + c] = raw[c] / s;
                }
            }
            let rec = record(Tensor::from_parts(vec![10, 10], w), false, 3);
            let d = attention_distance(&rec, &geom, false).unwrap()[0];
            assert!(d >= 0.0 && d <= geom.max_distance() + 1e-9);
        }
    }

    #[test]
    fn restricted_rows_are_renormalized_to_stochastic() {
        // conditioner column soaks up half of every row's mass; the
        // restricted block must still be row-stochastic
        let mut w = vec![0.0f32; 36];
        for r in 0..6 {
            w[r * 6 + 5] = 0.5;
            for c in 0..5 {
                w[r * 6 + c] = 0.1;
            }
        }
        let geom = TokenGeometry::new(2, 4);
        let rec = record(Tensor::from_parts(vec![6, 6], w), true, 2);
        let block = patch_block(&rec.heads[0].weights, true, 4).unwrap();
        for i in 0..4 {
            let s: f64 = block[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let d = attention_distance(&rec, &geom, false).unwrap();
        assert!(d[0] > 0.0);
    }

    #[test]
    fn profile_of_single_sample_equals_attention_distance() {
        let geom = TokenGeometry::new(2, 4);
        let rec = record(Tensor::filled(vec![5, 5], 0.2), false, 2);
        let direct = attention_distance(&rec, &geom, false).unwrap()[0];
        let samples =
            vec![vec![record(Tensor::filled(vec![5, 5], 0.2), false, 2)]];
        let p = profile(&samples, &geom).unwrap();
        assert_eq!(p.per_layer_head[0][0], direct);
        assert_eq!(p.per_layer_mean[0], direct);
        // two identical samples average to the same value
        let samples2 = vec![
            vec![record(Tensor::filled(vec![5, 5], 0.2), false, 2)],
            vec![record(Tensor::filled(vec![5, 5], 0.2), false, 2)],
        ];
        let p2 = profile(&samples2, &geom).unwrap();
        assert!((p2.per_layer_mean[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn rollout_identity_attention_is_degenerate_uniform() {
        let recs = vec![record(eye(5), false, 2)];
        let roll = attention_rollout(&recs).unwrap();
        assert!(roll.degenerate);
        assert_eq!(roll.saliency, vec![0.25; 4]);
    }

    #[test]
    fn rollout_point_mass_composes_to_point_mass() {
        // class token attends solely to patch 3 at every layer; patches
        // attend to themselves
        let mut w = vec![0.0f32; 25];
        w[0 * 5 + 4] = 1.0; // class -> patch index 3 (column 4)
        for i in 1..5 {
            w[i * 5 + i] = 1.0;
        }
        let t = Tensor::from_parts(vec![5, 5], w);
        let recs = vec![record(t.clone(), false, 2), record(t, false, 2)];
        let roll = attention_rollout(&recs).unwrap();
        assert!(!roll.degenerate);
        let expect_peak = roll.saliency[3];
        assert!(expect_peak > 0.99 * roll.saliency.iter().sum::<f64>() - 0.75);
        assert!(roll.saliency[3] > roll.saliency[0]);
        assert!((roll.saliency.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rollout_matches_matrix_product_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        // two layers of random row-stochastic 5x5 attention
        let mut mats = Vec::new();
        for _ in 0..2 {
            let mut w = vec![0.0f32; 25];
            for r in 0..5 {
                let raw: Vec<f32> = (0..5).map(|_| rng.gen_range(0.1f32..1.0)).collect();
                let s: f32 = raw.iter().sum();
                for c in 0..5 {
                    w[r * 5 + c] = raw[c] / s;
                }
            }
            mats.push(Tensor::from_parts(vec![5, 5], w));
        }
        let recs: Vec<AttentionRecord> =
            mats.iter().map(|m| record(m.clone(), false, 2)).collect();
        let roll = attention_rollout(&recs).unwrap();

        // explicit oracle: R = A2_hat * A1_hat in f64
        let hat = |t: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0f64; 25];
            for i in 0..5 {
                for j in 0..5 {
                    out[i * 5 + j] =
                        0.5 * t.get2(i, j) as f64 + if i == j { 0.5 } else { 0.0 };
                }
            }
            out
        };
        let (a1, a2) = (hat(&mats[0]), hat(&mats[1]));
        let mut r = vec![0.0f64; 25];
        for i in 0..5 {
            for k in 0..5 {
                for j in 0..5 {
                    r[i * 5 + j] += a2[i * 5 + k] * a1[k * 5 + j];
                }
            }
        }
        let class: Vec<f64> = r[1..5].to_vec();
        let s: f64 = class.iter().sum();
        for (got, want) in roll.saliency.iter().zip(class.iter().map(|v| v / s)) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!((roll.saliency.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn running_metrics_match_recount_oracle() {
        let mut rm = RunningMetrics::new();
        let batches = [(8usize, 6usize), (8, 8), (4, 1)];
        for (i, (n, c)) in batches.iter().enumerate() {
            rm.update(i, *n, *c, *n, *n, Some(0.5), false);
        }
        let total: usize = batches.iter().map(|(n, _)| n).sum();
        let correct: usize = batches.iter().map(|(_, c)| c).sum();
        assert!((rm.running_accuracy() - correct as f64 / total as f64).abs() < 1e-12);
        assert_eq!(rm.rows().len(), 3);
        assert_eq!(rm.rows()[1].batch_accuracy, 1.0);
    }

    #[test]
    fn all_correct_batches_give_running_accuracy_one() {
        let mut rm = RunningMetrics::new();
        for i in 0..3 {
            rm.update(i, 5, 5, 5, 5, Some(0.1), false);
        }
        assert_eq!(rm.running_accuracy(), 1.0);
    }

    #[test]
    fn skipped_batches_still_count_in_denominator() {
        let mut rm = RunningMetrics::new();
        rm.update(0, 10, 10, 10, 10, Some(0.2), false);
        rm.update(1, 10, 0, 0, 0, None, true);
        assert_eq!(rm.running_accuracy(), 0.5);
        assert_eq!(rm.skipped_batches(), 1);
        let csv = metrics_csv(rm.rows());
        // the skipped row has an empty loss field
        let line = csv.lines().nth(2).unwrap();
        assert!(line.contains(",,"), "empty loss field expected: {line}");
    }

    #[test]
    fn csv_headers_are_stable() {
        assert!(metrics_csv(&[]).starts_with("batch_idx,n_samples,"));
        assert!(profile_csv(&[]).starts_with("severity,layer,head,"));
        let emb = embed_csv(&[EmbeddingRow {
            sample_id: 1,
            domain: "gaussian_noise".into(),
            label: 2,
            layer: 0,
            features: vec![0.5, -1.25],
        }]);
        assert!(emb.starts_with("sample_id,domain,label,layer,f0,f1\n"));
        assert!(emb.contains("1,gaussian_noise,2,0,0.5,-1.25"));
    }
}
