//! How far fine-tuned weights move from the pretrained ones, per layer and
//! component, and how components rank against each other.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::params::{layer_of, ParamTree};
use crate::report::{fmt_f64, Table};
use crate::task::TaskId;
use crate::tensor::Float;
use crate::upcycle::TaskWeightCache;

/// `||a - b||_F` for every entry of two congruent trees.
pub fn frobenius_deviation<F: Float>(fine: &ParamTree<F>, pre: &ParamTree<F>) -> Result<BTreeMap<String, f64>> {
    fine.check_congruent(pre)?;
    Ok(fine
        .iter()
        .map(|(name, e)| {
            let b = pre.tensor(name).expect("congruent").data();
            let sq: f64 = e.tensor.data().iter().zip(b).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
            (name.to_string(), sq.sqrt())
        })
        .collect())
}

/// Whether Q/K/V/O are reported separately or pooled into SA and CA.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    Individual,
    Pooled,
}

/// Per-layer, per-component deviations for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationReport {
    pub task: TaskId,
    /// `(layer, component label) -> phi`.
    pub phi: BTreeMap<(usize, String), f64>,
}

/// Aggregates per-entry deviations by summing squares within each
/// (layer, component) group. Parameters outside SA, CA and FFN are skipped.
pub fn deviation_report<F: Float>(
    task: TaskId,
    fine: &ParamTree<F>,
    pre: &ParamTree<F>,
    grouping: Grouping,
) -> Result<DeviationReport> {
    let per_entry = frobenius_deviation(fine, pre)?;
    let mut sq: BTreeMap<(usize, String), f64> = BTreeMap::new();
    for (name, e) in fine.iter() {
        let (Some(layer), Some(class)) = (layer_of(name), e.component.class()) else { continue };
        let label = match grouping {
            Grouping::Individual => e.component.as_str(),
            Grouping::Pooled => class.as_str(),
        };
        *sq.entry((layer, label.to_string())).or_default() += per_entry[name].powi(2);
    }
    Ok(DeviationReport { task, phi: sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect() })
}

/// Ranks with 1 for the largest value; ties share the mean of the ranks they span.
pub fn midranks_desc(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRow {
    pub layer: usize,
    pub component: String,
    /// `(task, phi, rank)` with rank 1 = largest deviation in the layer.
    pub per_task: Vec<(TaskId, f64, f64)>,
    pub mean_phi: f64,
    pub mean_rank: f64,
    /// Average rank under the opposite convention (higher = larger deviation).
    pub mean_rank_ascending: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub rows: Vec<RankRow>,
}

pub fn rank_components(reports: &[DeviationReport]) -> Result<RankTable> {
    let first = reports.first().ok_or_else(|| Error::Config("ranking needs at least one task report".into()))?;
    let keys: BTreeSet<&(usize, String)> = first.phi.keys().collect();
    for r in &reports[1..] {
        if r.phi.keys().collect::<BTreeSet<_>>() != keys {
            return Err(Error::Incongruent(format!(
                "{} and {} reports cover different (layer, component) sets",
                first.task, r.task
            )));
        }
    }
    let layers: BTreeSet<usize> = keys.iter().map(|k| k.0).collect();
    let mut rows = Vec::new();
    for layer in layers {
        let comps: Vec<&String> = keys.iter().filter(|k| k.0 == layer).map(|k| &k.1).collect();
        let n = comps.len() as f64;
        let ranks: Vec<Vec<f64>> = reports
            .iter()
            .map(|r| midranks_desc(&comps.iter().map(|c| r.phi[&(layer, (*c).clone())]).collect::<Vec<_>>()))
            .collect();
        for (ci, c) in comps.iter().enumerate() {
            let per_task: Vec<(TaskId, f64, f64)> = reports
                .iter()
                .zip(&ranks)
                .map(|(r, rk)| (r.task, r.phi[&(layer, (*c).clone())], rk[ci]))
                .collect();
            let k = per_task.len() as f64;
            let mean_rank = per_task.iter().map(|p| p.2).sum::<f64>() / k;
            rows.push(RankRow {
                layer,
                component: (*c).clone(),
                mean_phi: per_task.iter().map(|p| p.1).sum::<f64>() / k,
                mean_rank,
                mean_rank_ascending: n + 1.0 - mean_rank,
                per_task,
            });
        }
    }
    Ok(RankTable { rows })
}

impl RankTable {
    /// Layers in which `component` has the strictly lowest mean rank, and the layer count.
    pub fn layers_led_by(&self, component: &str) -> (usize, usize) {
        let layers: BTreeSet<usize> = self.rows.iter().map(|r| r.layer).collect();
        let led = layers
            .iter()
            .filter(|&&l| {
                let in_layer: Vec<&RankRow> = self.rows.iter().filter(|r| r.layer == l).collect();
                let Some(target) = in_layer.iter().find(|r| r.component == component) else { return false };
                in_layer.iter().all(|r| r.component == component || target.mean_rank < r.mean_rank)
            })
            .count();
        (led, layers.len())
    }

    /// Columns `layer, component, task, phi, rank, rank_ascending`; each
    /// (layer, component) gets one row per task and a `mean` row.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["layer", "component", "task", "phi", "rank", "rank_ascending"])
            .comment("rank: 1 = largest deviation within the layer; rank_ascending: highest = largest deviation");
        for r in &self.rows {
            let n = self.rows.iter().filter(|x| x.layer == r.layer).count() as f64;
            for &(task, phi, rank) in &r.per_task {
                t.push([r.layer.to_string(), r.component.clone(), task.to_string(), fmt_f64(phi), fmt_f64(rank), fmt_f64(n + 1.0 - rank)]);
            }
            t.push([
                r.layer.to_string(),
                r.component.clone(),
                "mean".into(),
                fmt_f64(r.mean_phi),
                fmt_f64(r.mean_rank),
                fmt_f64(r.mean_rank_ascending),
            ]);
        }
        t
    }
}

/// Routing weights of one (task, layer).
#[derive(Clone, Debug, PartialEq)]
pub struct RouterRow {
    pub task: TaskId,
    pub layer: usize,
    pub weights: Vec<f64>,
    /// Largest weight; ties go to the lower index.
    pub argmax: usize,
}

pub fn export_router_distribution<F: Float>(cache: &TaskWeightCache<F>) -> Vec<RouterRow> {
    cache
        .iter()
        .map(|(task, layer, w)| {
            let weights: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
            let argmax = weights.iter().enumerate().fold(0, |best, (i, &v)| if v > weights[best] { i } else { best });
            RouterRow { task, layer, weights, argmax }
        })
        .collect()
}

/// Router weights of a model, computed through its cache.
pub fn router_distribution<F: Float>(model: &Denoiser<F>) -> Result<Vec<RouterRow>> {
    Ok(export_router_distribution(&TaskWeightCache::build(model)?))
}

pub fn router_table(rows: &[RouterRow]) -> Table {
    let mut t = Table::new(["task", "layer", "expert", "weight", "argmax"]);
    for r in rows {
        for (i, w) in r.weights.iter().enumerate() {
            t.push([r.task.to_string(), r.layer.to_string(), i.to_string(), fmt_f64(*w), (i == r.argmax).to_string()]);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Component;
    use crate::tensor::Tensor;

    fn report(task: TaskId, vals: &[(usize, &str, f64)]) -> DeviationReport {
        DeviationReport { task, phi: vals.iter().map(|&(l, c, v)| ((l, c.to_string()), v)).collect() }
    }

    #[test]
    fn hand_computed_deviation() {
        let mut a = ParamTree::<f64>::new();
        a.insert("block0.ffn.w1", Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), Component::Ffn).unwrap();
        let mut b = a.clone();
        b.get_mut("block0.ffn.w1").unwrap().tensor = Tensor::from_f64(&[2, 2], &[2.0, 2.0, 3.0, 5.0]).unwrap();
        assert_eq!(frobenius_deviation(&a, &a).unwrap()["block0.ffn.w1"], 0.0);
        assert_eq!(frobenius_deviation(&b, &a).unwrap()["block0.ffn.w1"], 2f64.sqrt());
        b.insert("block0.extra", Tensor::zeros(&[1]), Component::Other).unwrap();
        assert!(frobenius_deviation(&b, &a).unwrap_err().to_string().contains("block0.extra"));
    }

    #[test]
    fn ranking_examples() {
        let one = rank_components(&[report(TaskId::IE, &[(0, "FFN", 3.0), (0, "SA", 2.0), (0, "CA", 1.0)])]).unwrap();
        let rank = |t: &RankTable, c: &str| t.rows.iter().find(|r| r.component == c).unwrap().mean_rank;
        assert_eq!((rank(&one, "FFN"), rank(&one, "SA"), rank(&one, "CA")), (1.0, 2.0, 3.0));
        assert_eq!(one.layers_led_by("FFN"), (1, 1));
        let two = rank_components(&[
            report(TaskId::IE, &[(0, "FFN", 3.0), (0, "SA", 2.0), (0, "CA", 1.0)]),
            report(TaskId::SR, &[(0, "FFN", 9.0), (0, "SA", 5.0), (0, "CA", 4.0)]),
        ])
        .unwrap();
        assert_eq!(rank(&two, "SA"), 2.0);
        let bad = rank_components(&[report(TaskId::IE, &[(0, "FFN", 1.0)]), report(TaskId::SR, &[(1, "FFN", 1.0)])]);
        assert!(bad.is_err());
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks_desc(&[1.0, 5.0, 5.0, 0.0]), vec![3.0, 1.5, 1.5, 4.0]);
    }
}
