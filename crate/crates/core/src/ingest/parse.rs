use std::collections::BTreeMap;

use log::warn;

/// One raw usage record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub user_id: String,
    pub timestamp: i64,
    pub app_id: String,
    pub station_id: Option<String>,
}

/// A row that could not be turned into an [`Event`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

/// Events grouped per user, each list sorted by timestamp (stable on ties).
#[derive(Clone, Debug, Default)]
pub struct ParsedLog {
    pub users: BTreeMap<String, Vec<Event>>,
    pub errors: Vec<RowError>,
}

impl ParsedLog {
    pub fn event_count(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }
}

fn parse_row(row: &str, delimiter: char) -> Result<Event, String> {
    let fields: Vec<&str> = row.split(delimiter).map(str::trim).collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(format!("expected 3 or 4 fields, found {}", fields.len()));
    }
    if fields[0].is_empty() {
        return Err("empty user id".into());
    }
    if fields[2].is_empty() {
        return Err("empty app id".into());
    }
    let timestamp: i64 = fields[1]
        .parse()
        .map_err(|_| format!("unparseable timestamp `{}`", fields[1]))?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    let station_id = fields
        .get(3)
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string());
    Ok(Event {
        user_id: fields[0].to_string(),
        timestamp,
        app_id: fields[2].to_string(),
        station_id,
    })
}

fn is_header(row: &str, delimiter: char) -> bool {
    row.split(delimiter)
        .nth(1)
        .is_some_and(|f| f.trim().eq_ignore_ascii_case("timestamp"))
}

/// Parses `user_id<d>timestamp<d>app_id[<d>station_id]` rows. Blank lines are
/// ignored, a leading header row is detected by its `timestamp` column name,
/// and malformed rows are skipped and reported with their 1-based line number.
pub fn parse_events(text: &str, delimiter: char) -> ParsedLog {
    let mut log = ParsedLog::default();
    for (i, raw) in text.lines().enumerate() {
        let row = raw.trim();
        if row.is_empty() || (i == 0 && is_header(row, delimiter)) {
            continue;
        }
        match parse_row(row, delimiter) {
            Ok(ev) => log.users.entry(ev.user_id.clone()).or_default().push(ev),
            Err(message) => log.errors.push(RowError {
                line: i + 1,
                message,
            }),
        }
    }
    for events in log.users.values_mut() {
        events.sort_by_key(|e| e.timestamp);
    }
    if !log.errors.is_empty() {
        warn!("skipped {} malformed rows", log.errors.len());
    }
    log
}

/// Per-station POI count vectors: rows `station_id,x_1,...,x_M`.
pub fn parse_poi(text: &str, delimiter: char) -> Result<Vec<(String, Vec<f64>)>, RowError> {
    let mut rows = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let err = |message: String| RowError {
            line: i + 1,
            message,
        };
        let mut fields = row.split(delimiter).map(str::trim);
        let id = fields.next().unwrap_or_default().to_string();
        let values: Vec<f64> = match fields.map(str::parse::<f64>).collect() {
            Ok(v) => v,
            Err(_) if i == 0 => continue, // header
            Err(e) => return Err(err(format!("bad POI value: {e}"))),
        };
        if values.is_empty() {
            return Err(err("no POI features".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(err("POI counts must be finite and nonnegative".into()));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(err(format!("expected {w} features, found {}", values.len())))
            }
            _ => {}
        }
        rows.push((id, values));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_field_row() {
        let log = parse_events("u1,100,appA,bs7", ',');
        assert_eq!(
            log.users["u1"],
            vec![Event {
                user_id: "u1".into(),
                timestamp: 100,
                app_id: "appA".into(),
                station_id: Some("bs7".into()),
            }]
        );
    }

    #[test]
    fn three_field_row_has_no_station() {
        let log = parse_events("u1,100,appA", ',');
        assert_eq!(log.users["u1"][0].station_id, None);
    }

    #[test]
    fn bad_timestamp_is_skipped_and_reported() {
        let log = parse_events("u1,100,appA\nu1,abc,appA\nu1,50,appB", ',');
        assert_eq!(log.event_count(), 2);
        assert_eq!(log.errors.len(), 1);
        assert_eq!(log.errors[0].line, 2);
        // out-of-order rows are sorted
        assert_eq!(log.users["u1"][0].timestamp, 50);
    }

    #[test]
    fn header_and_custom_delimiter() {
        let log = parse_events("user;timestamp;app\nu1;5;x\n\nu2;7;y", ';');
        assert!(log.errors.is_empty());
        assert_eq!(log.users.len(), 2);
    }

    #[test]
    fn sort_is_stable_on_ties() {
        let log = parse_events("u,5,b\nu,5,a\nu,1,c", ',');
        let apps: Vec<_> = log.users["u"].iter().map(|e| e.app_id.as_str()).collect();
        assert_eq!(apps, ["c", "b", "a"]);
    }

    #[test]
    fn poi_table() {
        let rows = parse_poi("station,a,b\nbs1,1,2\nbs2,0,5", ',').unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].1, vec![0.0, 5.0]);
        assert!(parse_poi("bs1,1,2\nbs2,1", ',').is_err());
    }
}
