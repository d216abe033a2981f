//! Routing telemetry and its aggregation by missing rate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One routing decision of one fusion layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    /// Video name during evaluation, `train` during training.
    pub source: String,
    /// Frame index during evaluation, step during training.
    pub index: usize,
    pub layer: usize,
    /// Fraction of the sample's timesteps with a modality missing.
    pub missing_rate: f64,
    /// Selected expert indices.
    pub selected: Vec<usize>,
    /// Hidden widths of the selected experts, aligned with `selected`.
    pub widths: Vec<usize>,
}

pub const ROUTING_CSV_HEADER: &str = "source,index,layer,missing_rate,selected,widths";

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub fn routing_csv(records: &[RoutingRecord]) -> String {
    let mut s = format!("{ROUTING_CSV_HEADER}\n");
    for r in records {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.source,
            r.index,
            r.layer,
            r.missing_rate,
            join(&r.selected),
            join(&r.widths)
        );
    }
    s
}

pub fn write_routing_csv(path: &Path, records: &[RoutingRecord]) -> Result<()> {
    fs::write(path, routing_csv(records)).map_err(|e| Error::io(path, e))
}

/// Missing-rate buckets `{0}, (0, 0.3], (0.3, 0.7], (0.7, 1]`.
pub const BUCKET_LABELS: [&str; 4] = ["0", "(0-0.3]", "(0.3-0.7]", "(0.7-1]"];

pub fn bucket_of(rate: f64) -> usize {
    if rate <= 0.0 {
        0
    } else if rate <= 0.3 {
        1
    } else if rate <= 0.7 {
        2
    } else {
        3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub records: usize,
    /// Mean hidden width over every selected expert in the bucket; `None`
    /// for an empty bucket.
    pub mean_width: Option<f64>,
    /// Selection count per expert index.
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub widths: Vec<usize>,
    pub rows: Vec<BucketRow>,
}

/// Per-bucket mean selected width and selection histogram.
pub fn analyze_routing(records: &[RoutingRecord], widths: &[usize]) -> Result<RoutingTable> {
    if records.is_empty() {
        return Err(Error::Validation("routing telemetry is empty".into()));
    }
    let m = widths.len();
    let mut rows: Vec<BucketRow> = BUCKET_LABELS
        .iter()
        .map(|l| BucketRow {
            bucket: l.to_string(),
            records: 0,
            mean_width: None,
            counts: vec![0; m],
        })
        .collect();
    let mut width_sum = [0.0f64; 4];
    let mut slots = [0usize; 4];
    for r in records {
        let b = bucket_of(r.missing_rate);
        rows[b].records += 1;
        for &n in &r.selected {
            if n >= m {
                return Err(Error::Validation(format!("record selects expert {n} of {m}")));
            }
            rows[b].counts[n] += 1;
            width_sum[b] += widths[n] as f64;
            slots[b] += 1;
        }
    }
    for (b, row) in rows.iter_mut().enumerate() {
        if slots[b] > 0 {
            row.mean_width = Some(width_sum[b] / slots[b] as f64);
        }
    }
    Ok(RoutingTable {
        widths: widths.to_vec(),
        rows,
    })
}

impl RoutingTable {
    /// `bucket,records,mean_width,count_w4,count_w8,…`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket,records,mean_width");
        for (n, w) in self.widths.iter().enumerate() {
            s += &format!(",e{n}_w{w}");
        }
        s.push('\n');
        for r in &self.rows {
            s += &format!(
                "{},{},{}",
                r.bucket,
                r.records,
                r.mean_width.map_or(String::new(), |v| v.to_string())
            );
            for c in &r.counts {
                s += &format!(",{c}");
            }
            s.push('\n');
        }
        s
    }

    /// Mean selected width over all records, regardless of bucket.
    pub fn overall_mean_width(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in &self.rows {
            for (e, &c) in r.counts.iter().enumerate() {
                sum += (self.widths[e] * c) as f64;
                n += c;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Grouped bar chart of per-expert selection share in each bucket. Bar
/// heights are `counts[e] / sum(counts)`, the same numbers as the CSV twin.
pub fn routing_svg(table: &RoutingTable) -> String {
    const W: f64 = 640.0;
    const H: f64 = 320.0;
    const MARGIN: f64 = 40.0;
    let m = table.widths.len().max(1);
    let groups = table.rows.len().max(1);
    let group_w = (W - 2.0 * MARGIN) / groups as f64;
    let bar_w = group_w * 0.8 / m as f64;
    let plot_h = H - 2.0 * MARGIN;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    s += &format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n");
    s += &format!(
        "<line x1=\"{MARGIN}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = H - MARGIN,
        x2 = W - MARGIN
    );
    s += &format!(
        "<text x=\"{MARGIN}\" y=\"20\" font-size=\"12\">expert selection share per missing-rate bucket</text>\n"
    );
    for (g, row) in table.rows.iter().enumerate() {
        let total: usize = row.counts.iter().sum();
        let x0 = MARGIN + g as f64 * group_w + group_w * 0.1;
        for (e, &c) in row.counts.iter().enumerate() {
            let share = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            let h = share * plot_h;
            let shade = 40 + 180 * e / (m - 1).max(1);
            s += &format!(
                "<rect class=\"bar\" data-bucket=\"{}\" data-width=\"{}\" data-share=\"{share}\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({shade},{},{})\"/>\n",
                row.bucket,
                table.widths[e],
                x0 + e as f64 * bar_w,
                H - MARGIN - h,
                bar_w,
                h,
                90,
                240 - shade
            );
        }
        s += &format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{} (n={})</text>\n",
            x0,
            H - MARGIN + 16.0,
            row.bucket,
            row.records
        );
    }
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rate: f64, selected: Vec<usize>, widths: &[usize]) -> RoutingRecord {
        RoutingRecord {
            source: "v".into(),
            index: 0,
            layer: 0,
            missing_rate: rate,
            widths: selected.iter().map(|&n| widths[n]).collect(),
            selected,
        }
    }

    const W: [usize; 8] = [4, 8, 16, 32, 64, 128, 256, 512];

    #[test]
    fn constant_selection_gives_constant_mean() {
        let recs: Vec<_> = [0.0, 0.25, 0.5, 1.0].iter().map(|&r| rec(r, vec![0, 1], &W)).collect();
        let t = analyze_routing(&recs, &W).unwrap();
        for row in &t.rows {
            assert_eq!(row.mean_width, Some(6.0));
        }
    }

    #[test]
    fn single_record_mean() {
        let t = analyze_routing(&[rec(0.5, vec![7, 0], &W)], &W).unwrap();
        assert_eq!(t.rows[2].mean_width, Some(258.0));
        assert_eq!(t.rows[0].mean_width, None);
    }

    #[test]
    fn empty_is_validation_error() {
        assert!(matches!(analyze_routing(&[], &W), Err(Error::Validation(_))));
    }

    #[test]
    fn buckets_edges() {
        assert_eq!(bucket_of(0.0), 0);
        assert_eq!(bucket_of(0.3), 1);
        assert_eq!(bucket_of(0.31), 2);
        assert_eq!(bucket_of(0.7), 2);
        assert_eq!(bucket_of(0.75), 3);
        assert_eq!(bucket_of(1.0), 3);
    }

    #[test]
    fn counts_and_csv_sum_to_selections() {
        let recs = vec![rec(0.0, vec![1, 2], &W), rec(0.5, vec![2, 7], &W), rec(0.5, vec![7, 3], &W)];
        let t = analyze_routing(&recs, &W).unwrap();
        let total: usize = t.rows.iter().flat_map(|r| r.counts.iter()).sum();
        assert_eq!(total, 6);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("bucket,records,mean_width,e0_w4"));
        assert_eq!(t.overall_mean_width(), Some((8.0 + 16.0 + 16.0 + 512.0 + 512.0 + 32.0) / 6.0));
    }

    #[test]
    fn svg_bars_match_table_shares() {
        let recs = vec![rec(0.0, vec![1, 2], &W), rec(0.5, vec![2, 7], &W), rec(0.5, vec![7, 3], &W)];
        let t = analyze_routing(&recs, &W).unwrap();
        let svg = routing_svg(&t);
        assert_eq!(svg.matches("class=\"bar\"").count(), 4 * W.len());
        assert!(svg.contains("data-bucket=\"(0.3-0.7]\" data-width=\"512\" data-share=\"0.5\""));
        assert!(svg.contains("data-bucket=\"0\" data-width=\"8\" data-share=\"0.5\""));
    }
}
