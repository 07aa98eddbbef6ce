use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::net::IpAddr;
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::Deserialize;
use serde_json::Value;

use super::record::{host_of_url, parse_timestamp, parse_timestamp_str, HttpRequestRecord};
use super::IngestError;

/// On-disk log layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    JsonLines,
    /// CSV with a header row naming the columns.
    Csv,
}

impl LogFormat {
    /// Picks the format from the file extension, looking through a `.gz`
    /// suffix. Anything that is not `.csv` is read as JSON Lines.
    pub fn from_path(path: &Path) -> LogFormat {
        let name = path.file_name().map(|n| n.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
        let name = name.strip_suffix(".gz").unwrap_or(&name);
        if name.ends_with(".csv") {
            LogFormat::Csv
        } else {
            LogFormat::JsonLines
        }
    }
}

/// A successfully parsed line plus the number of optional fields that were
/// present but unusable and therefore dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub record: HttpRequestRecord,
    pub dropped_fields: u32,
}

#[derive(Deserialize)]
struct RawJson {
    #[serde(alias = "timestamp")]
    ts: Option<Value>,
    #[serde(alias = "user_id")]
    uid: Option<String>,
    url: Option<String>,
    #[serde(alias = "user_agent")]
    ua: Option<Value>,
    referer: Option<Value>,
    bytes_out: Option<Value>,
    bytes_in: Option<Value>,
    #[serde(alias = "duration_ms")]
    dur: Option<Value>,
    #[serde(alias = "client_ip")]
    ip: Option<Value>,
    city: Option<Value>,
}

/// Parses one JSON Lines record.
pub fn parse_json_record(line: &str) -> Result<Parsed, IngestError> {
    let raw: RawJson = serde_json::from_str(line).map_err(|e| IngestError::malformed(format!("json: {e}")))?;
    let timestamp_ms = parse_timestamp(raw.ts.as_ref().ok_or_else(|| IngestError::malformed("missing ts"))?)?;
    let user_id = raw.uid.filter(|u| !u.is_empty()).ok_or_else(|| IngestError::malformed("missing uid"))?;
    let url = raw.url.filter(|u| !u.is_empty()).ok_or_else(|| IngestError::malformed("missing url"))?;
    let host = host_of_url(&url)?;

    let mut dropped = 0u32;
    let mut text = |v: Option<Value>| -> Option<String> {
        match v {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if s.is_empty() => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => {
                dropped += 1;
                None
            }
        }
    };
    let user_agent = text(raw.ua).unwrap_or_default();
    let referer = text(raw.referer);
    let city = text(raw.city);
    let ip_text = text(raw.ip);

    let mut count = |v: Option<Value>| -> u64 {
        match v {
            None | Some(Value::Null) => 0,
            Some(Value::Number(n)) if n.as_u64().is_some() => n.as_u64().unwrap_or(0),
            Some(Value::String(s)) if s.parse::<u64>().is_ok() => s.parse().unwrap_or(0),
            Some(_) => {
                dropped += 1;
                0
            }
        }
    };
    let bytes_out = count(raw.bytes_out);
    let bytes_in = count(raw.bytes_in);
    let duration_ms = count(raw.dur);

    let client_ip = match ip_text {
        None => None,
        Some(s) => match s.parse::<IpAddr>() {
            Ok(ip) => Some(ip),
            Err(_) => {
                dropped += 1;
                None
            }
        },
    };

    Ok(Parsed {
        record: HttpRequestRecord {
            timestamp_ms,
            user_id,
            url,
            host,
            user_agent,
            referer,
            bytes_out,
            bytes_in,
            duration_ms,
            client_ip,
            city,
        },
        dropped_fields: dropped,
    })
}

/// Column positions of a CSV log, resolved from its header row.
#[derive(Debug, Clone)]
pub struct CsvLayout {
    index: HashMap<&'static str, usize>,
}

const CSV_COLUMNS: &[(&str, &[&str])] = &[
    ("ts", &["ts", "timestamp"]),
    ("uid", &["uid", "user_id"]),
    ("url", &["url"]),
    ("ua", &["ua", "user_agent"]),
    ("referer", &["referer"]),
    ("bytes_out", &["bytes_out"]),
    ("bytes_in", &["bytes_in"]),
    ("dur", &["dur", "duration_ms"]),
    ("ip", &["ip", "client_ip"]),
    ("city", &["city"]),
];

impl CsvLayout {
    /// The column order written by this crate:
    /// `ts,uid,url,ua,referer,bytes_out,bytes_in,dur,ip,city`.
    pub fn canonical() -> Self {
        CsvLayout { index: CSV_COLUMNS.iter().enumerate().map(|(i, (k, _))| (*k, i)).collect() }
    }

    pub fn from_header<'a>(header: impl IntoIterator<Item = &'a str>) -> Result<Self, IngestError> {
        let mut index = HashMap::new();
        for (pos, name) in header.into_iter().enumerate() {
            let name = name.trim().to_ascii_lowercase();
            if let Some((key, _)) = CSV_COLUMNS.iter().find(|(_, names)| names.contains(&name.as_str())) {
                index.insert(*key, pos);
            }
        }
        for required in ["ts", "uid", "url"] {
            if !index.contains_key(required) {
                return Err(IngestError::BadHeader(format!("missing column {required}")));
            }
        }
        Ok(CsvLayout { index })
    }

    fn get<'a>(&self, fields: &'a csv::StringRecord, key: &str) -> Option<&'a str> {
        self.index.get(key).and_then(|&i| fields.get(i)).map(str::trim).filter(|s| !s.is_empty())
    }
}

/// Parses one already-split CSV row.
pub fn parse_csv_fields(fields: &csv::StringRecord, layout: &CsvLayout) -> Result<Parsed, IngestError> {
    let timestamp_ms =
        parse_timestamp_str(layout.get(fields, "ts").ok_or_else(|| IngestError::malformed("missing ts"))?)?;
    let user_id = layout.get(fields, "uid").ok_or_else(|| IngestError::malformed("missing uid"))?.to_string();
    let url = layout.get(fields, "url").ok_or_else(|| IngestError::malformed("missing url"))?.to_string();
    let host = host_of_url(&url)?;

    let mut dropped = 0u32;
    let mut count = |key: &str| -> u64 {
        match layout.get(fields, key) {
            None => 0,
            Some(s) => s.parse().unwrap_or_else(|_| {
                dropped += 1;
                0
            }),
        }
    };
    let bytes_out = count("bytes_out");
    let bytes_in = count("bytes_in");
    let duration_ms = count("dur");
    let client_ip = layout.get(fields, "ip").and_then(|s| {
        s.parse::<IpAddr>().ok().or_else(|| {
            dropped += 1;
            None
        })
    });

    Ok(Parsed {
        record: HttpRequestRecord {
            timestamp_ms,
            user_id,
            url,
            host,
            user_agent: layout.get(fields, "ua").unwrap_or_default().to_string(),
            referer: layout.get(fields, "referer").map(str::to_string),
            bytes_out,
            bytes_in,
            duration_ms,
            client_ip,
            city: layout.get(fields, "city").map(str::to_string),
        },
        dropped_fields: dropped,
    })
}

/// Parses a single line in the given format. CSV lines are read against the
/// canonical column order; use [`Ingestor`] for CSV files with other headers.
pub fn parse_record(line: &str, format: LogFormat) -> Result<Parsed, IngestError> {
    match format {
        LogFormat::JsonLines => parse_json_record(line),
        LogFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(line.as_bytes());
            let fields = rdr
                .records()
                .next()
                .ok_or_else(|| IngestError::malformed("empty csv line"))?
                .map_err(|e| IngestError::malformed(format!("csv: {e}")))?;
            parse_csv_fields(&fields, &CsvLayout::canonical())
        }
    }
}

/// Counters kept while ingesting; `parsed + skipped == lines` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct IngestStats {
    pub lines: u64,
    pub parsed: u64,
    /// Malformed or out-of-window lines.
    pub skipped: u64,
    pub out_of_window: u64,
    /// Optional fields present but unusable (dropped, record kept).
    pub dropped_fields: u64,
}

impl IngestStats {
    pub fn merge(&mut self, other: &IngestStats) {
        self.lines += other.lines;
        self.parsed += other.parsed;
        self.skipped += other.skipped;
        self.out_of_window += other.out_of_window;
        self.dropped_fields += other.dropped_fields;
    }
}

/// Streams records out of log files, counting everything it drops.
#[derive(Debug, Default)]
pub struct Ingestor {
    /// Inclusive `[start, end]` window in epoch ms; records outside are skipped.
    pub window: Option<(i64, i64)>,
    pub stats: IngestStats,
}

impl Ingestor {
    pub fn new(window: Option<(i64, i64)>) -> Self {
        Ingestor { window, stats: IngestStats::default() }
    }

    fn admit(&mut self, parsed: Result<Parsed, IngestError>) -> Option<HttpRequestRecord> {
        self.stats.lines += 1;
        match parsed {
            Ok(p) => {
                if let Some((start, end)) = self.window {
                    if p.record.timestamp_ms < start || p.record.timestamp_ms > end {
                        self.stats.skipped += 1;
                        self.stats.out_of_window += 1;
                        return None;
                    }
                }
                self.stats.parsed += 1;
                self.stats.dropped_fields += u64::from(p.dropped_fields);
                Some(p.record)
            }
            Err(_) => {
                self.stats.skipped += 1;
                None
            }
        }
    }

    /// Parses one line, returning the record if it is admitted.
    pub fn ingest_line(&mut self, line: &str, format: LogFormat) -> Option<HttpRequestRecord> {
        let parsed = parse_record(line, format);
        self.admit(parsed)
    }

    pub fn ingest_reader<R: Read>(
        &mut self,
        reader: R,
        format: LogFormat,
        mut sink: impl FnMut(HttpRequestRecord),
    ) -> Result<(), IngestError> {
        match format {
            LogFormat::JsonLines => {
                let mut buf = BufReader::with_capacity(1 << 16, reader);
                let mut line = String::new();
                loop {
                    line.clear();
                    if buf.read_line(&mut line)? == 0 {
                        break;
                    }
                    let trimmed = line.trim_end_matches(['\n', '\r']);
                    if trimmed.trim().is_empty() {
                        continue;
                    }
                    if let Some(r) = self.admit(parse_json_record(trimmed)) {
                        sink(r);
                    }
                }
            }
            LogFormat::Csv => {
                let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
                let layout =
                    CsvLayout::from_header(rdr.headers().map_err(|e| IngestError::BadHeader(e.to_string()))?.iter())?;
                let mut fields = csv::StringRecord::new();
                loop {
                    match rdr.read_record(&mut fields) {
                        Ok(false) => break,
                        Ok(true) => {
                            if let Some(r) = self.admit(parse_csv_fields(&fields, &layout)) {
                                sink(r);
                            }
                        }
                        Err(e) if e.is_io_error() => {
                            return Err(IngestError::Io(io::Error::other(e.to_string())));
                        }
                        Err(e) => {
                            let _ = self.admit(Err(IngestError::malformed(format!("csv: {e}"))));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads a `.jsonl`/`.csv` file, gzip-decompressing `*.gz`.
    pub fn ingest_path(&mut self, path: &Path, sink: impl FnMut(HttpRequestRecord)) -> Result<(), IngestError> {
        let format = LogFormat::from_path(path);
        let file = File::open(path)?;
        let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
        if gz {
            self.ingest_reader(MultiGzDecoder::new(file), format, sink)
        } else {
            self.ingest_reader(file, format, sink)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_record_maps_schema() {
        let line = r#"{"ts":1431648000000,"uid":"u1","url":"http://cpp.imp.mpx.mopub.com/imp?charge_price=0.95","ua":"Mozilla/5.0"}"#;
        let p = parse_record(line, LogFormat::JsonLines).unwrap();
        assert_eq!(p.record.host, "cpp.imp.mpx.mopub.com");
        assert_eq!(p.record.user_id, "u1");
        assert_eq!(p.record.timestamp_ms, 1_431_648_000_000);
        assert_eq!(p.record.user_agent, "Mozilla/5.0");
        assert_eq!(p.dropped_fields, 0);
    }

    #[test]
    fn missing_required_fields_are_malformed() {
        for line in [
            r#"{"ts":1,"uid":"u1"}"#,
            r#"{"ts":1,"url":"http://a.com/"}"#,
            r#"{"uid":"u1","url":"http://a.com/"}"#,
            r#"not json"#,
        ] {
            assert!(matches!(parse_record(line, LogFormat::JsonLines), Err(IngestError::MalformedRecord(_))));
        }
    }

    #[test]
    fn bad_optional_fields_are_dropped_and_counted() {
        let line = r#"{"ts":"2015-05-15T00:00:00Z","uid":"u1","url":"http://a.com/","ip":"999.1.1.1","bytes_in":"lots","referer":7}"#;
        let p = parse_record(line, LogFormat::JsonLines).unwrap();
        assert_eq!(p.dropped_fields, 3);
        assert_eq!(p.record.client_ip, None);
        assert_eq!(p.record.referer, None);
    }

    #[test]
    fn csv_row_with_empty_referer() {
        let line = "1431648000000,u1,http://a.com/x,Mozilla,,10,20,5,10.0.0.1,";
        let p = parse_record(line, LogFormat::Csv).unwrap();
        assert_eq!(p.record.referer, None);
        assert_eq!(p.record.bytes_in, 20);
        assert_eq!(p.record.client_ip, Some("10.0.0.1".parse().unwrap()));
        assert_eq!(p.record.city, None);
    }

    #[test]
    fn csv_reader_uses_header_order() {
        let data = "url,uid,ts,city\nhttp://a.com/,u1,5,Madrid\nhttp://b.com/,,6,\n";
        let mut ing = Ingestor::default();
        let mut out = Vec::new();
        ing.ingest_reader(data.as_bytes(), LogFormat::Csv, |r| out.push(r)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].city.as_deref(), Some("Madrid"));
        assert_eq!(ing.stats.lines, 2);
        assert_eq!(ing.stats.skipped, 1);
    }

    #[test]
    fn window_filter_counts_as_skipped() {
        let data =
            "{\"ts\":5,\"uid\":\"a\",\"url\":\"http://a.com/\"}\n{\"ts\":50,\"uid\":\"a\",\"url\":\"http://a.com/\"}\n";
        let mut ing = Ingestor::new(Some((0, 10)));
        let mut n = 0;
        ing.ingest_reader(data.as_bytes(), LogFormat::JsonLines, |_| n += 1).unwrap();
        assert_eq!(n, 1);
        assert_eq!(ing.stats.out_of_window, 1);
        assert_eq!(ing.stats.parsed + ing.stats.skipped, ing.stats.lines);
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(LogFormat::from_path(Path::new("x.csv.gz")), LogFormat::Csv);
        assert_eq!(LogFormat::from_path(Path::new("x.jsonl.gz")), LogFormat::JsonLines);
        assert_eq!(LogFormat::from_path(Path::new("x.CSV")), LogFormat::Csv);
    }
}
