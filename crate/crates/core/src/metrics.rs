//! Overlap and surface-distance metrics for binary and multi-class masks.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{flat_index, unflatten, voxel_count, Shape3};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("surface distance undefined: {0} mask is empty")]
    EmptyMask(&'static str),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Metrics of one (volume, class) pair. Surface distances are `NaN` with
/// `surface_defined = false` when either mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
    pub surface_defined: bool,
}

fn check_len(pred: &[bool], gt: &[bool], shape: Shape3) -> Result<(), MetricError> {
    let n = voxel_count(shape);
    if pred.len() != n || gt.len() != n {
        let as_shape = |len: usize| [len, 1, 1];
        return Err(MetricError::ShapeMismatch(as_shape(pred.len()), as_shape(gt.len())));
    }
    Ok(())
}

/// `(dice, jaccard)`; both 1 when both masks are empty.
pub fn overlap_metrics(pred: &[bool], gt: &[bool]) -> Result<(f64, f64), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch([pred.len(), 1, 1], [gt.len(), 1, 1]));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - inter;
    Ok((2.0 * inter as f64 / (p + g) as f64, inter as f64 / union as f64))
}

/// Foreground voxels with at least one 6-neighbor that is background or
/// outside the volume.
pub fn boundary(mask: &[bool], shape: Shape3) -> Vec<usize> {
    (0..mask.len())
        .filter(|&v| mask[v])
        .filter(|&v| {
            let p = unflatten(shape, v);
            (0..3).any(|axis| {
                let lo = p[axis] == 0 || {
                    let mut q = p;
                    q[axis] -= 1;
                    !mask[flat_index(shape, q[0], q[1], q[2])]
                };
                let hi = p[axis] + 1 == shape[axis] || {
                    let mut q = p;
                    q[axis] += 1;
                    !mask[flat_index(shape, q[0], q[1], q[2])]
                };
                lo || hi
            })
        })
        .collect()
}

/// Lower envelope of parabolas along one line: `f` holds squared distances,
/// `step` the physical voxel spacing.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut k = 0usize;
    let first = match (0..n).find(|&i| f[i].is_finite()) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in physical units) from every voxel to the
/// nearest voxel of `targets`.
pub fn squared_distance_transform(targets: &[usize], shape: Shape3, spacing: [f64; 3]) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; voxel_count(shape)];
    for &t in targets {
        d[t] = 0.0;
    }
    let longest = *shape.iter().max().unwrap_or(&1);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let n = shape[axis];
        let [a, b] = match axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        for i in 0..shape[a] {
            for j in 0..shape[b] {
                let idx = |k: usize| {
                    let mut p = [0; 3];
                    p[axis] = k;
                    p[a] = i;
                    p[b] = j;
                    flat_index(shape, p[0], p[1], p[2])
                };
                for k in 0..n {
                    line[k] = d[idx(k)];
                }
                edt_line(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut z);
                for k in 0..n {
                    d[idx(k)] = out[k];
                }
            }
        }
    }
    d
}

/// Percentile `q` in [0, 100] with linear interpolation between order
/// statistics (the default convention of common numerical libraries).
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

fn directed(from: &[usize], to_dist: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = from.iter().map(|&v| to_dist[v].sqrt()).collect();
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    d
}

/// `(hd95, asd)` between the boundaries of two nonempty masks.
pub fn surface_metrics(pred: &[bool], gt: &[bool], shape: Shape3, spacing: [f64; 3]) -> Result<(f64, f64), MetricError> {
    check_len(pred, gt, shape)?;
    let bp = boundary(pred, shape);
    let bg = boundary(gt, shape);
    if bp.is_empty() {
        return Err(MetricError::EmptyMask("prediction"));
    }
    if bg.is_empty() {
        return Err(MetricError::EmptyMask("reference"));
    }
    let to_gt = directed(&bp, &squared_distance_transform(&bg, shape, spacing));
    let to_pred = directed(&bg, &squared_distance_transform(&bp, shape, spacing));
    let hd95 = percentile_linear(&to_gt, 95.0).max(percentile_linear(&to_pred, 95.0));
    let asd = (to_gt.iter().sum::<f64>() + to_pred.iter().sum::<f64>()) / (to_gt.len() + to_pred.len()) as f64;
    Ok((hd95, asd))
}

/// All four metrics for one binary pair.
pub fn binary_report(pred: &[bool], gt: &[bool], shape: Shape3, spacing: [f64; 3]) -> Result<MetricReport, MetricError> {
    check_len(pred, gt, shape)?;
    let (dice, jaccard) = overlap_metrics(pred, gt)?;
    match surface_metrics(pred, gt, shape, spacing) {
        Ok((hd95, asd)) => Ok(MetricReport { dice, jaccard, hd95, asd, surface_defined: true }),
        Err(MetricError::EmptyMask(_)) => {
            Ok(MetricReport { dice, jaccard, hd95: f64::NAN, asd: f64::NAN, surface_defined: false })
        }
        Err(e) => Err(e),
    }
}

/// One-vs-rest reports for every foreground class `1..num_classes`.
pub fn evaluate_labels(
    pred: &[u8],
    gt: &[u8],
    shape: Shape3,
    spacing: [f64; 3],
    num_classes: usize,
) -> Result<Vec<(usize, MetricReport)>, MetricError> {
    (1..num_classes)
        .map(|c| {
            let p: Vec<bool> = pred.iter().map(|&x| x as usize == c).collect();
            let g: Vec<bool> = gt.iter().map(|&x| x as usize == c).collect();
            Ok((c, binary_report(&p, &g, shape, spacing)?))
        })
        .collect()
}

/// Mean of each metric; surface metrics average only the defined entries.
pub fn macro_average(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len().max(1) as f64;
    let defined: Vec<&MetricReport> = reports.iter().filter(|r| r.surface_defined).collect();
    let mean_of = |f: &dyn Fn(&MetricReport) -> f64| {
        if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().map(|r| f(r)).sum::<f64>() / defined.len() as f64
        }
    };
    MetricReport {
        dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
        jaccard: reports.iter().map(|r| r.jaccard).sum::<f64>() / n,
        hd95: mean_of(&|r| r.hd95),
        asd: mean_of(&|r| r.asd),
        surface_defined: !defined.is_empty(),
    }
}

/// One row per (volume, class) plus a final `macro` row. Dice and Jaccard
/// are written in percent.
pub fn write_metrics_csv(path: &Path, rows: &[(String, usize, MetricReport)]) -> Result<(), MetricError> {
    let io = |source| MetricError::Io { path: path.to_path_buf(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "volume,class,dice,jaccard,hd95,asd,surface_defined").map_err(io)?;
    let line = |name: &str, class: &str, r: &MetricReport| {
        format!(
            "{name},{class},{:.4},{:.4},{:.4},{:.4},{}",
            r.dice * 100.0,
            r.jaccard * 100.0,
            r.hd95,
            r.asd,
            r.surface_defined
        )
    };
    for (name, class, r) in rows {
        writeln!(f, "{}", line(name, &class.to_string(), r)).map_err(io)?;
    }
    let all: Vec<MetricReport> = rows.iter().map(|r| r.2).collect();
    writeln!(f, "{}", line("macro", "all", &macro_average(&all))).map_err(io)?;
    f.flush().map_err(io)
}
