//! Report emission: CSV and JSON renderings of the analysis outputs.
//!
//! Everything here is byte-deterministic: floats are rounded to six
//! significant digits before display, map-like structures keep fixed orders,
//! and no timestamps appear.

use serde::{Deserialize, Serialize};

use crate::baselines::EnsembleEntropyReport;
use crate::info::PviRecord;
use crate::pd::{Pd, PdHistogram, PdRecord};
use crate::saliency::SaliencyMap;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rounds to six significant digits and prints the shortest representation.
pub fn fmt_sig(x: f64) -> String {
    const SIG: i32 = 6;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-9..=15).contains(&exp) {
        return format!("{:.*e}", (SIG - 1) as usize, x);
    }
    let digits = SIG - 1 - exp;
    let factor = 10f64.powi(digits);
    let rounded = (x * factor).round() / factor;
    format!("{rounded}")
}

fn pd_cell(pd: Pd) -> String {
    match pd {
        Pd::Depth(d) => d.to_string(),
        Pd::Undefined => "undefined".into(),
    }
}

/// `probe_index,count` rows plus `undefined,count` and `mean_pd,value`.
pub fn pd_histogram_csv(hist: &PdHistogram) -> String {
    let mut out = String::from("probe_index,count\n");
    for (i, &c) in hist.counts.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, c));
    }
    out.push_str(&format!("undefined,{}\n", hist.undefined));
    let mean = hist.mean_pd.map_or("nan".into(), fmt_sig);
    out.push_str(&format!("mean_pd,{mean}\n"));
    out
}

/// `sample_id,pd,final_class,valid_tail` per evaluated sample.
pub fn pd_trace_csv(records: &[PdRecord]) -> String {
    let mut out = String::from("sample_id,pd,final_class,valid_tail\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.sample_id,
            pd_cell(r.pd),
            r.final_class(),
            r.valid_tail()
        ));
    }
    out
}

/// JSON mirror of the histogram. The undefined bucket is a named key, never
/// a probe index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdReportJson {
    pub schema_version: u32,
    pub counts: Vec<usize>,
    pub undefined: usize,
    pub total: usize,
    pub mean_pd: Option<f64>,
}

impl PdReportJson {
    pub fn new(hist: &PdHistogram) -> Self {
        PdReportJson {
            schema_version: REPORT_SCHEMA_VERSION,
            counts: hist.counts.clone(),
            undefined: hist.undefined,
            total: hist.total,
            mean_pd: hist.mean_pd.map(round_sig),
        }
    }
}

/// JSON mirror of the per-sample trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdTraceJson {
    pub schema_version: u32,
    pub samples: Vec<PdTraceRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdTraceRow {
    pub sample_id: usize,
    pub pd: Pd,
    pub final_class: u32,
    pub valid_tail: String,
}

impl PdTraceJson {
    pub fn new(records: &[PdRecord]) -> Self {
        PdTraceJson {
            schema_version: REPORT_SCHEMA_VERSION,
            samples: records
                .iter()
                .map(|r| PdTraceRow {
                    sample_id: r.sample_id,
                    pd: r.pd,
                    final_class: r.final_class(),
                    valid_tail: r.valid_tail(),
                })
                .collect(),
        }
    }
}

/// `sample_id,pvi_bits,neg_log2_gprime` per sample.
pub fn pvi_csv(record: &PviRecord) -> String {
    let mut out = String::from("sample_id,pvi_bits,neg_log2_gprime\n");
    for (i, (pvi, gp)) in record
        .per_sample_pvi
        .iter()
        .zip(&record.per_sample_neg_log2_gprime)
        .enumerate()
    {
        out.push_str(&format!("{},{},{}\n", i, fmt_sig(*pvi), fmt_sig(*gp)));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PviSummaryJson {
    pub schema_version: u32,
    pub h_y_bits: f64,
    pub h_y_given_x_bits: f64,
    pub v_information: f64,
    pub clamp_count: usize,
    pub samples: usize,
}

impl PviSummaryJson {
    pub fn new(record: &PviRecord) -> Self {
        PviSummaryJson {
            schema_version: REPORT_SCHEMA_VERSION,
            h_y_bits: round_sig(record.h_y_bits),
            h_y_given_x_bits: round_sig(record.h_y_given_x_bits),
            v_information: round_sig(record.v_information),
            clamp_count: record.clamp_count,
            samples: record.per_sample_pvi.len(),
        }
    }
}

/// `row,col,value` per cell of a saliency map.
pub fn saliency_csv(map: &SaliencyMap) -> String {
    let (h, w) = (map.values.dims()[0], map.values.dims()[1]);
    let mut out = String::from("row,col,value\n");
    for r in 0..h {
        for c in 0..w {
            out.push_str(&format!(
                "{r},{c},{}\n",
                fmt_sig(map.values.data()[r * w + c] as f64)
            ));
        }
    }
    out
}

/// Per-sample difficulty CSV for the ensemble baseline.
pub fn ensemble_entropy_csv(report: &EnsembleEntropyReport) -> String {
    let mut out = String::from("sample_id,entropy_nats\n");
    for (i, e) in report.per_sample_nats.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i, fmt_sig(*e)));
    }
    out.push_str(&format!("mean,{}\n", fmt_sig(report.mean_nats)));
    out
}

/// Rounds a float to six significant digits (the JSON-side counterpart of
/// [`fmt_sig`]).
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let exp = x.abs().log10().floor() as i32;
    let digits = 5 - exp;
    if !(-300..=300).contains(&digits) {
        return x;
    }
    let factor = 10f64.powi(digits);
    (x * factor).round() / factor
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.693147180559945), "0.693147");
        assert_eq!(fmt_sig(2.0), "2");
        assert_eq!(fmt_sig(123456789.0), "123457000");
        assert_eq!(fmt_sig(-0.000123456789), "-0.000123457");
        assert_eq!(fmt_sig(f64::NAN), "nan");
        assert_eq!(fmt_sig(0.0), "0");
    }

    #[test]
    fn histogram_csv_round_trips_counts() {
        let hist = PdHistogram {
            counts: vec![5, 0, 2],
            undefined: 3,
            total: 10,
            mean_pd: Some(1.571428),
        };
        let csv = pd_histogram_csv(&hist);
        let mut counts = Vec::new();
        let mut undefined = None;
        for line in csv.lines().skip(1) {
            let (key, value) = line.split_once(',').unwrap();
            match key {
                "undefined" => undefined = Some(value.parse::<usize>().unwrap()),
                "mean_pd" => {
                    assert!((value.parse::<f64>().unwrap() - 1.57143).abs() < 1e-5)
                }
                idx => {
                    assert_eq!(idx.parse::<usize>().unwrap(), counts.len() + 1);
                    counts.push(value.parse::<usize>().unwrap());
                }
            }
        }
        assert_eq!(counts, hist.counts);
        assert_eq!(undefined, Some(3));
    }

    #[test]
    fn undefined_serializes_as_string_key() {
        let json = serde_json::to_string(&Pd::Undefined).unwrap();
        assert_eq!(json, "\"undefined\"");
        let json = serde_json::to_string(&Pd::Depth(4)).unwrap();
        assert_eq!(json, "4");
    }
}
