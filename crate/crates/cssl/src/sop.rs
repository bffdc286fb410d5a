//! Synaptic-operation accounting and activation-density bookkeeping.
//!
//! One SOp is one multiply-accumulate. Bias additions and the sigmoid/tanh
//! evaluations on threshold paths are not SOps; they scale with output size
//! rather than with synapse count. Counting is exact integer arithmetic and
//! never perturbs the numerics it observes.

use crate::tensor::Tensor;
use std::fmt::Write as _;

/// Kernel geometry needed to count a convolution, independent of the tape.
#[derive(Debug, Clone, Copy)]
pub struct ConvCount {
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Exact synaptic operations of one convolution application.
///
/// Sparse mode sums, over every nonzero input entry, the number of valid
/// output positions that entry touches, times the output channel count.
/// Dense mode is the full H'·W'·Cout·Cin·kH·kW·N product, which also pays
/// for kernel taps that land in the zero padding; sparse ≤ dense always,
/// with equality exactly when the input has no zeros and padding is 0.
pub fn count_conv_sop(input: &Tensor, c: ConvCount, sparse: bool) -> u64 {
    let (n, cin, h, w) = input
        .dims4("count_conv_sop")
        .expect("count_conv_sop: input must be NCHW");
    let oh = (h + 2 * c.pad - c.kh) / c.stride + 1;
    let ow = (w + 2 * c.pad - c.kw) / c.stride + 1;
    if !sparse {
        return (n * oh * ow * c.cout * cin * c.kh * c.kw) as u64;
    }
    // touches(ih, iw) factorizes into per-row and per-column counts.
    let touch_1d = |len: usize, klen: usize, olen: usize| -> Vec<u64> {
        let mut t = vec![0u64; len];
        for (i, ti) in t.iter_mut().enumerate() {
            let mut count = 0u64;
            for kk in 0..klen {
                let o_num = i as isize + c.pad as isize - kk as isize;
                if o_num >= 0 && o_num % c.stride as isize == 0 {
                    let o = (o_num / c.stride as isize) as usize;
                    if o < olen {
                        count += 1;
                    }
                }
            }
            *ti = count;
        }
        t
    };
    let th = touch_1d(h, c.kh, oh);
    let tw = touch_1d(w, c.kw, ow);
    let mut touched = 0u64;
    let data = input.data();
    for ni in 0..n {
        for ci in 0..cin {
            let base = (ni * cin + ci) * h * w;
            for ih in 0..h {
                let row = base + ih * w;
                let rh = th[ih];
                if rh == 0 {
                    continue;
                }
                for iw in 0..w {
                    if data[row + iw] != 0.0 {
                        touched += rh * tw[iw];
                    }
                }
            }
        }
    }
    touched * c.cout as u64
}

/// Fraction of nonzero entries of a tensor.
pub fn density(t: &Tensor) -> f64 {
    t.density()
}

/// Which conv inside a layer an SOp charge belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SOpPath {
    /// The feature-producing conv (plus any shortcut projection).
    Main,
    /// The conv that computes the context-aware threshold.
    Threshold,
}

#[derive(Debug, Clone, Default)]
struct LayerRecord {
    name: String,
    sop_main: u64,
    sop_threshold: u64,
    dense_sop: u64,
    nonzero: u64,
    total: u64,
    steps: u64,
}

/// Per-layer accumulators of synaptic operations and output activation
/// density, in network order. Merging two ledgers is an elementwise sum.
#[derive(Debug, Clone, Default)]
pub struct SOpLedger {
    layers: Vec<LayerRecord>,
}

/// One row of [`SOpLedger::report`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub layer: String,
    pub density: f64,
    pub sop: u64,
    pub gsop: f64,
}

impl SOpLedger {
    pub fn new() -> Self {
        SOpLedger::default()
    }

    fn entry(&mut self, name: &str) -> &mut LayerRecord {
        if let Some(pos) = self.layers.iter().position(|l| l.name == name) {
            &mut self.layers[pos]
        } else {
            self.layers.push(LayerRecord {
                name: name.to_string(),
                ..LayerRecord::default()
            });
            self.layers.last_mut().unwrap()
        }
    }

    /// Adds a conv's exact SOp charge to `layer` under `path`. `dense_sop`
    /// is the dense-formula cost of the same geometry, kept for ratio
    /// reporting.
    pub fn add_sop(&mut self, layer: &str, path: SOpPath, sop: u64, dense_sop: u64) {
        let rec = self.entry(layer);
        match path {
            SOpPath::Main => rec.sop_main += sop,
            SOpPath::Threshold => rec.sop_threshold += sop,
        }
        rec.dense_sop += dense_sop;
    }

    /// Records a layer's output activation occupancy for one step.
    pub fn add_activation(&mut self, layer: &str, nonzero: u64, total: u64) {
        let rec = self.entry(layer);
        rec.nonzero += nonzero;
        rec.total += total;
        rec.steps += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total SOp across all layers and paths.
    pub fn total_sop(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.sop_main + l.sop_threshold)
            .sum()
    }

    pub fn total_dense_sop(&self) -> u64 {
        self.layers.iter().map(|l| l.dense_sop).sum()
    }

    /// Unweighted mean of per-layer output densities.
    pub fn mean_density(&self) -> f64 {
        let with_act: Vec<f64> = self
            .layers
            .iter()
            .filter(|l| l.total > 0)
            .map(|l| l.nonzero as f64 / l.total as f64)
            .collect();
        if with_act.is_empty() {
            0.0
        } else {
            with_act.iter().sum::<f64>() / with_act.len() as f64
        }
    }

    /// Per-layer density of a single named layer, if recorded.
    pub fn layer_density(&self, name: &str) -> Option<f64> {
        self.layers
            .iter()
            .find(|l| l.name == name && l.total > 0)
            .map(|l| l.nonzero as f64 / l.total as f64)
    }

    /// Threshold-path SOp share per layer, for the path breakdown report.
    pub fn path_rows(&self) -> Vec<(String, u64, u64)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.sop_main, l.sop_threshold))
            .collect()
    }

    /// Folds another ledger into this one (associative, commutative).
    pub fn merge(&mut self, other: &SOpLedger) {
        for l in &other.layers {
            let rec = self.entry(&l.name);
            rec.sop_main += l.sop_main;
            rec.sop_threshold += l.sop_threshold;
            rec.dense_sop += l.dense_sop;
            rec.nonzero += l.nonzero;
            rec.total += l.total;
            rec.steps += l.steps;
        }
    }

    /// One row per layer in network order, threshold path folded in, plus a
    /// totals row. Returns None when nothing has been recorded.
    pub fn report(&self) -> Option<Vec<DensityRow>> {
        if self.layers.is_empty() {
            return None;
        }
        let mut rows: Vec<DensityRow> = self
            .layers
            .iter()
            .map(|l| {
                let sop = l.sop_main + l.sop_threshold;
                DensityRow {
                    layer: l.name.clone(),
                    density: if l.total > 0 {
                        l.nonzero as f64 / l.total as f64
                    } else {
                        0.0
                    },
                    sop,
                    gsop: sop as f64 / 1e9,
                }
            })
            .collect();
        let total = self.total_sop();
        rows.push(DensityRow {
            layer: "total".to_string(),
            density: self.mean_density(),
            sop: total,
            gsop: total as f64 / 1e9,
        });
        Some(rows)
    }

    /// CSV serialization of [`SOpLedger::report`].
    pub fn report_csv(&self) -> Option<String> {
        let rows = self.report()?;
        let mut out = String::from("layer,density,sop,gsop\n");
        for r in rows {
            writeln!(out, "{},{},{},{}", r.layer, r.density, r.sop, r.gsop).unwrap();
        }
        Some(out)
    }

    /// CSV of the main/threshold SOp breakdown per layer.
    pub fn paths_csv(&self) -> Option<String> {
        if self.layers.is_empty() {
            return None;
        }
        let mut out = String::from("layer,main_sop,threshold_sop\n");
        for (name, main, thr) in self.path_rows() {
            writeln!(out, "{name},{main},{thr}").unwrap();
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_center_pixel_touch_count() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let c = ConvCount { cout: 2, kh: 3, kw: 3, stride: 1, pad: 1 };
        assert_eq!(count_conv_sop(&x, c, true), 18);
    }

    #[test]
    fn all_zero_input_sparse_is_zero() {
        let x = Tensor::zeros(&[2, 3, 6, 6]);
        let c = ConvCount { cout: 4, kh: 3, kw: 3, stride: 2, pad: 1 };
        assert_eq!(count_conv_sop(&x, c, true), 0);
        assert!(count_conv_sop(&x, c, false) > 0);
    }

    #[test]
    fn dense_equals_sparse_when_full_and_unpadded() {
        let x = Tensor::full(&[1, 2, 6, 6], 0.5);
        let c = ConvCount { cout: 3, kh: 3, kw: 3, stride: 1, pad: 0 };
        assert_eq!(count_conv_sop(&x, c, true), count_conv_sop(&x, c, false));
    }

    #[test]
    fn report_layout() {
        let mut ledger = SOpLedger::new();
        ledger.add_sop("only", SOpPath::Main, 54, 100);
        ledger.add_activation("only", 5, 20);
        let rows = ledger.report().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].layer, "only");
        assert_eq!(rows[0].density, 0.25);
        assert_eq!(rows[0].sop, 54);
        assert!((rows[0].gsop - 5.4e-8).abs() < 1e-20);
        assert_eq!(rows[1].layer, "total");
        assert_eq!(rows[1].sop, 54);
    }

    #[test]
    fn empty_ledger_reports_none() {
        assert!(SOpLedger::new().report().is_none());
        assert!(SOpLedger::new().report_csv().is_none());
    }

    #[test]
    fn totals_row_sums_layers() {
        let mut ledger = SOpLedger::new();
        ledger.add_sop("a", SOpPath::Main, 10, 20);
        ledger.add_sop("a", SOpPath::Threshold, 5, 20);
        ledger.add_sop("b", SOpPath::Main, 7, 9);
        let rows = ledger.report().unwrap();
        assert_eq!(rows.last().unwrap().sop, 22);
    }
}
