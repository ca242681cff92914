//! CSV and JSON renderings of results, and readers for them.
//!
//! Floats are written with six significant digits. Every JSON document
//! carries `schema_version` and a `kind` tag next to its `data`.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::analytics::{Anchor, CalibrationOutcome, RatioReport, SweepResult};
use crate::attribution::BreakdownReport;
use crate::rlsys::{SimResult, TimeSeriesRow};

pub const SCHEMA_VERSION: u32 = 1;

pub const SWEEP_HEADER: [&str; 7] = [
    "value",
    "fps",
    "runtime_norm",
    "speedup",
    "avg_power_w",
    "perf_per_watt",
    "energy_per_frame_j",
];

pub const BREAKDOWN_HEADER: [&str; 3] = ["label", "seconds", "fraction"];

pub const TIMESERIES_HEADER: [&str; 5] = ["t", "fps", "cpu_busy", "gpu_busy", "power_w"];

pub const METRIC_HEADER: [&str; 2] = ["metric", "value"];

pub const ANCHOR_HEADER: [&str; 5] = ["name", "target", "tolerance", "achieved", "score"];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header { found: Vec<String>, expected: Vec<String> },
    #[error("unsupported schema_version {0}")]
    Schema(u64),
    #[error("expected a {expected} document, found {found:?}")]
    Kind { expected: String, found: String },
    #[error("bad number {0:?}")]
    Number(String),
}

/// Rounds to six significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("float formatting round-trips")
}

/// Six significant digits, plain decimal notation, `.` as the separator.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let r = round_sig(x);
        if r == 0.0 { "0".into() } else { r.to_string() }
    }
}

fn parse_num(s: &str) -> Result<f64, ReportError> {
    match s {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|_| ReportError::Number(s.to_string())),
    }
}

fn parse_opt(s: &str) -> Result<Option<f64>, ReportError> {
    if s.is_empty() { Ok(None) } else { parse_num(s).map(Some) }
}

fn opt_sig(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig(n.as_f64().expect("f64 number"));
            Number::from_f64(x).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_value).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_value(v))).collect()),
        other => other,
    }
}

/// Wraps `data` as `{schema_version, kind, data}` with rounded floats.
pub fn json_document<T: Serialize>(kind: &str, data: &T) -> String {
    let mut doc = Map::new();
    doc.insert("schema_version".into(), SCHEMA_VERSION.into());
    doc.insert("kind".into(), kind.into());
    doc.insert(
        "data".into(),
        round_value(serde_json::to_value(data).expect("report types serialize")),
    );
    let mut text = serde_json::to_string_pretty(&Value::Object(doc)).expect("values serialize");
    text.push('\n');
    text
}

/// Reads a document written by [`json_document`].
pub fn read_json_document<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T, ReportError> {
    let mut doc: Value = serde_json::from_str(text)?;
    let version = doc["schema_version"].as_u64().unwrap_or(0);
    if version != u64::from(SCHEMA_VERSION) {
        return Err(ReportError::Schema(version));
    }
    let found = doc["kind"].as_str().unwrap_or_default();
    if found != kind {
        return Err(ReportError::Kind {
            expected: kind.into(),
            found: found.into(),
        });
    }
    Ok(serde_json::from_value(doc["data"].take())?)
}

fn write_csv<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>())
            .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is utf-8")
}

fn read_csv(header: &[&str], text: &str) -> Result<Vec<csv::StringRecord>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(ReportError::Header {
            found,
            expected: header.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(r.records().collect::<Result<_, _>>()?)
}

pub fn sim_result_json(r: &SimResult) -> String {
    json_document("sim_result", r)
}

pub fn read_sim_result_json(text: &str) -> Result<SimResult, ReportError> {
    read_json_document("sim_result", text)
}

fn sim_metrics(r: &SimResult) -> Vec<(&'static str, f64)> {
    vec![
        ("sim_duration", r.sim_duration),
        ("measured_duration", r.measured_duration),
        ("env_frames", r.env_frames as f64),
        ("frames_per_second", r.frames_per_second),
        ("cpu_busy_fraction", r.cpu_busy_fraction),
        ("gpu_busy_fraction", r.gpu_busy_fraction),
        ("mean_inference_batch_occupancy", r.mean_inference_batch_occupancy),
        ("mean_inference_queue_wait", r.mean_inference_queue_wait),
        ("train_steps", r.train_steps as f64),
        ("avg_power_w", r.avg_power),
        ("energy_j", r.energy),
        ("energy_per_frame_j", r.energy_per_frame),
        ("perf_per_watt", r.frames_per_watt_second),
        ("gpu_peak_power_w", r.power.peak_power),
    ]
}

/// Two-column `metric,value` table of a run's headline numbers.
pub fn sim_result_csv(r: &SimResult) -> String {
    write_csv(
        &METRIC_HEADER,
        sim_metrics(r).into_iter().map(|(k, v)| [k.to_string(), fmt_sig(v)]),
    )
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<(String, f64)>, ReportError> {
    read_csv(&METRIC_HEADER, text)?
        .iter()
        .map(|rec| Ok((rec[0].to_string(), parse_num(&rec[1])?)))
        .collect()
}

/// Rows in report order.
pub fn breakdown_csv(b: &BreakdownReport) -> String {
    write_csv(
        &BREAKDOWN_HEADER,
        b.segments
            .iter()
            .map(|s| [s.label.clone(), fmt_sig(s.seconds), fmt_sig(s.fraction)]),
    )
}

pub fn read_breakdown_csv(text: &str) -> Result<Vec<(String, f64, f64)>, ReportError> {
    read_csv(&BREAKDOWN_HEADER, text)?
        .iter()
        .map(|rec| Ok((rec[0].to_string(), parse_num(&rec[1])?, parse_num(&rec[2])?)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SecondsFraction {
    seconds: f64,
    fraction: f64,
}

#[derive(Serialize, Deserialize)]
struct BreakdownDoc {
    baseline_time: f64,
    segments: Map<String, Value>,
}

/// JSON object keyed by label, in report order.
pub fn breakdown_json(b: &BreakdownReport) -> String {
    let segments = b
        .segments
        .iter()
        .map(|s| {
            let v = SecondsFraction {
                seconds: s.seconds,
                fraction: s.fraction,
            };
            (s.label.clone(), serde_json::to_value(v).expect("plain struct"))
        })
        .collect();
    json_document(
        "breakdown",
        &BreakdownDoc {
            baseline_time: b.baseline_time,
            segments,
        },
    )
}

pub fn read_breakdown_json(text: &str) -> Result<BreakdownReport, ReportError> {
    let doc: BreakdownDoc = read_json_document("breakdown", text)?;
    let segments = doc
        .segments
        .into_iter()
        .map(|(label, v)| {
            let sf: SecondsFraction = serde_json::from_value(v)?;
            Ok(crate::attribution::Segment {
                label,
                seconds: sf.seconds,
                fraction: sf.fraction,
            })
        })
        .collect::<Result<_, ReportError>>()?;
    Ok(BreakdownReport {
        baseline_time: doc.baseline_time,
        segments,
    })
}

/// One parsed row of a sweep table; empty cells are failed points.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: u32,
    pub fps: Option<f64>,
    pub runtime_norm: Option<f64>,
    pub speedup: Option<f64>,
    pub avg_power_w: Option<f64>,
    pub perf_per_watt: Option<f64>,
    pub energy_per_frame_j: Option<f64>,
}

pub fn sweep_csv(s: &SweepResult) -> String {
    write_csv(
        &SWEEP_HEADER,
        s.points.iter().map(|p| {
            let r = p.result.as_ref();
            [
                p.value.to_string(),
                opt_sig(r.map(|r| r.frames_per_second)),
                opt_sig(p.runtime_norm),
                opt_sig(p.speedup),
                opt_sig(r.map(|r| r.avg_power)),
                opt_sig(r.map(|r| r.frames_per_watt_second)),
                opt_sig(r.map(|r| r.energy_per_frame)),
            ]
        }),
    )
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>, ReportError> {
    read_csv(&SWEEP_HEADER, text)?
        .iter()
        .map(|rec| {
            Ok(SweepRow {
                value: rec[0].parse().map_err(|_| ReportError::Number(rec[0].to_string()))?,
                fps: parse_opt(&rec[1])?,
                runtime_norm: parse_opt(&rec[2])?,
                speedup: parse_opt(&rec[3])?,
                avg_power_w: parse_opt(&rec[4])?,
                perf_per_watt: parse_opt(&rec[5])?,
                energy_per_frame_j: parse_opt(&rec[6])?,
            })
        })
        .collect()
}

pub fn sweep_json(s: &SweepResult) -> String {
    json_document("sweep", s)
}

pub fn read_sweep_json(text: &str) -> Result<SweepResult, ReportError> {
    read_json_document("sweep", text)
}

pub fn timeseries_csv(rows: &[TimeSeriesRow]) -> String {
    write_csv(
        &TIMESERIES_HEADER,
        rows.iter().map(|r| [r.t, r.fps, r.cpu_busy, r.gpu_busy, r.power_w].map(fmt_sig)),
    )
}

pub fn read_timeseries_csv(text: &str) -> Result<Vec<TimeSeriesRow>, ReportError> {
    read_csv(&TIMESERIES_HEADER, text)?
        .iter()
        .map(|rec| {
            Ok(TimeSeriesRow {
                t: parse_num(&rec[0])?,
                fps: parse_num(&rec[1])?,
                cpu_busy: parse_num(&rec[2])?,
                gpu_busy: parse_num(&rec[3])?,
                power_w: parse_num(&rec[4])?,
            })
        })
        .collect()
}

pub fn ratio_json(r: &RatioReport) -> String {
    json_document("ratio", r)
}

pub fn read_ratio_json(text: &str) -> Result<RatioReport, ReportError> {
    read_json_document("ratio", text)
}

/// `metric,value` table of a ratio report; ratios stay exact (`1/16`).
pub fn ratio_csv(r: &RatioReport) -> String {
    let rows = [
        ("cpu_threads", r.cpu_threads.to_string()),
        ("total_sms", r.total_sms.to_string()),
        ("ratio", r.ratio.to_string()),
        ("ratio_decimal", fmt_sig(r.ratio_decimal)),
        (
            "recommended_min_ratio",
            r.recommended_min_ratio.map(|x| x.to_string()).unwrap_or_default(),
        ),
        ("recommended_min_ratio_decimal", opt_sig(r.recommended_min_ratio_decimal)),
        (
            "recommended_sms_per_gpu",
            r.recommended_sms_per_gpu.map(|x| x.to_string()).unwrap_or_default(),
        ),
        ("delta", opt_sig(r.delta)),
        ("verdict", r.verdict.clone()),
    ];
    write_csv(&METRIC_HEADER, rows.into_iter().map(|(k, v)| [k.to_string(), v]))
}

/// Raw `(metric, value)` cells of any two-column table.
pub fn read_metric_cells(text: &str) -> Result<Vec<(String, String)>, ReportError> {
    Ok(read_csv(&METRIC_HEADER, text)?
        .iter()
        .map(|rec| (rec[0].to_string(), rec[1].to_string()))
        .collect())
}

pub fn timeseries_json(rows: &[TimeSeriesRow]) -> String {
    json_document("timeseries", &rows)
}

pub fn read_timeseries_json(text: &str) -> Result<Vec<TimeSeriesRow>, ReportError> {
    read_json_document("timeseries", text)
}

pub fn anchors_csv(anchors: &[Anchor]) -> String {
    write_csv(
        &ANCHOR_HEADER,
        anchors.iter().map(|a| {
            [
                a.name.clone(),
                fmt_sig(a.target),
                fmt_sig(a.tolerance),
                fmt_sig(a.achieved),
                fmt_sig(a.score),
            ]
        }),
    )
}

pub fn read_anchors_csv(text: &str) -> Result<Vec<Anchor>, ReportError> {
    read_csv(&ANCHOR_HEADER, text)?
        .iter()
        .map(|rec| {
            Ok(Anchor {
                name: rec[0].to_string(),
                target: parse_num(&rec[1])?,
                tolerance: parse_num(&rec[2])?,
                achieved: parse_num(&rec[3])?,
                score: parse_num(&rec[4])?,
            })
        })
        .collect()
}

pub fn calibration_json(c: &CalibrationOutcome) -> String {
    json_document("calibration", c)
}

pub fn read_calibration_json(text: &str) -> Result<CalibrationOutcome, ReportError> {
    read_json_document("calibration", text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::SYSTEM_LABELS;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(1234567.0), "1234570");
        assert_eq!(fmt_sig(0.123456789), "0.123457");
        assert_eq!(fmt_sig(-2.5e-7), "-0.00000025");
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
        assert_eq!(parse_num("inf").unwrap(), f64::INFINITY);
    }

    #[test]
    fn breakdown_round_trips() {
        let b = BreakdownReport::from_levels(&SYSTEM_LABELS, &[10.0, 7.0, 4.0, 1.0]);
        let csv = breakdown_csv(&b);
        assert!(csv.starts_with("label,seconds,fraction\ncpu_thread_contention,3,0.3\n"));
        let rows = read_breakdown_csv(&csv).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3], ("residual_pipeline".to_string(), 1.0, 0.1));

        let json = breakdown_json(&b);
        assert!(json.contains("\"schema_version\": 1"));
        let back = read_breakdown_json(&json).unwrap();
        assert_eq!(back, b);
        let pos: Vec<usize> = SYSTEM_LABELS.iter().map(|l| json.find(l).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn wrong_kind_and_version_are_rejected() {
        let text = json_document("sweep", &1.0);
        assert!(matches!(
            read_json_document::<f64>("ratio", &text),
            Err(ReportError::Kind { .. })
        ));
        let old = text.replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(read_json_document::<f64>("sweep", &old), Err(ReportError::Schema(7))));
    }

    #[test]
    fn timeseries_round_trips() {
        let rows = vec![
            TimeSeriesRow {
                t: 0.5,
                fps: 1000.0,
                cpu_busy: 0.25,
                gpu_busy: 1.0,
                power_w: 300.0,
            },
            TimeSeriesRow {
                t: 1.0,
                fps: 123.4567891,
                cpu_busy: 0.0,
                gpu_busy: 0.5,
                power_w: 185.0,
            },
        ];
        let text = timeseries_csv(&rows);
        assert!(text.starts_with("t,fps,cpu_busy,gpu_busy,power_w\n"));
        let back = read_timeseries_csv(&text).unwrap();
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1].fps, 123.457);
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(matches!(read_sweep_csv("a,b\n1,2\n"), Err(ReportError::Header { .. })));
    }

    #[test]
    fn ratio_table_keeps_exact_ratio() {
        let mut r = crate::analytics::cpu_gpu_ratio(&crate::model::preset("dgx1-v100").unwrap().hardware);
        let cells = read_metric_cells(&ratio_csv(&r)).unwrap();
        assert_eq!(cells[2], ("ratio".to_string(), "1/16".to_string()));
        assert_eq!(cells[4].1, "");
        r.recommended_min_ratio = Some(crate::CpuGpuRatio::new(1, 2));
        let back = read_ratio_json(&ratio_json(&r)).unwrap();
        assert_eq!(back.recommended_min_ratio, r.recommended_min_ratio);
        assert_eq!(back.ratio, r.ratio);
    }

    #[test]
    fn anchors_round_trip() {
        let a = vec![Anchor {
            name: "math".into(),
            target: 0.57,
            tolerance: 0.03,
            achieved: 0.5712345678,
            score: 0.04115226,
        }];
        let back = read_anchors_csv(&anchors_csv(&a)).unwrap();
        assert_eq!(back[0].achieved, 0.571235);
        assert_eq!(back[0].name, "math");
    }
}
