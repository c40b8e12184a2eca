use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub rating: Option<f64>,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogFormat {
    /// `user::item::rating::timestamp`
    MovielensDcolon,
    /// `user<TAB>item<TAB>[rating<TAB>]timestamp`
    Tsv,
}

/// Raw id strings mapped to dense indices in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    index: HashMap<String, usize>,
    raw: Vec<String>,
}

impl IdMap {
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.raw.len();
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), id);
        id
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> &str {
        &self.raw[dense]
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Largest raw id when every raw id is a non-negative integer. For
    /// MovieLens this is the catalog size, which exceeds the number of
    /// distinct ids that actually received ratings.
    pub fn max_numeric(&self) -> Option<u64> {
        self.raw
            .iter()
            .map(|r| r.parse::<u64>().ok())
            .try_fold(0u64, |acc, v| v.map(|v| acc.max(v)))
            .filter(|_| !self.raw.is_empty())
    }

    /// Two-column text form: `raw<TAB>dense`, one per line, dense order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.raw.iter().enumerate() {
            s.push_str(r);
            s.push('\t');
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut map = IdMap::default();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (raw, dense) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected two columns", n + 1))?;
            let dense: usize = dense
                .parse()
                .map_err(|_| format!("line {}: bad index `{dense}`", n + 1))?;
            if dense != map.len() {
                return Err(format!("line {}: indices must be dense and ordered", n + 1));
            }
            map.intern(raw);
        }
        Ok(map)
    }
}

#[derive(Clone, Debug)]
pub struct ParsedLog {
    /// Sorted by `(user, timestamp)`, file order within ties.
    pub records: Vec<InteractionRecord>,
    pub users: IdMap,
    pub items: IdMap,
    pub lines: usize,
    pub malformed: usize,
}

fn parse_line(line: &str, format: LogFormat) -> Option<(&str, &str, Option<f64>, i64)> {
    let fields: Vec<&str> = match format {
        LogFormat::MovielensDcolon => line.split("::").collect(),
        LogFormat::Tsv => line.split('\t').collect(),
    };
    let (user, item, rating, ts) = match (format, fields.as_slice()) {
        (_, [u, i, r, t]) => (*u, *i, Some(*r), *t),
        (LogFormat::Tsv, [u, i, t]) => (*u, *i, None, *t),
        _ => return None,
    };
    let user = user.trim();
    let item = item.trim();
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let rating = match rating.map(str::trim) {
        None | Some("") => None,
        Some(r) => Some(r.parse::<f64>().ok().filter(|v| v.is_finite())?),
    };
    let ts = ts.trim().parse::<i64>().ok()?;
    Some((user, item, rating, ts))
}

/// Parses an interaction log and remaps ids to dense indices.
///
/// Malformed lines are skipped and counted; more than 1% of non-empty lines
/// malformed is an error.
pub fn parse_interactions(path: &Path, format: LogFormat) -> Result<ParsedLog> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut records = Vec::new();
    let (mut lines, mut malformed) = (0usize, 0usize);
    let mut buf = Vec::new();
    let mut reader = reader;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        // ML-1M ships latin-1 text in other files; be lenient here too.
        let line = String::from_utf8_lossy(&buf);
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_line(line, format) {
            Some((u, i, rating, timestamp)) => records.push(InteractionRecord {
                user: users.intern(u),
                item: items.intern(i),
                rating,
                timestamp,
            }),
            None => malformed += 1,
        }
    }
    if malformed * 100 > lines {
        return Err(Error::TooManyMalformed {
            path: path.to_path_buf(),
            malformed,
            total: lines,
        });
    }
    records.sort_by_key(|r| (r.user, r.timestamp));
    Ok(ParsedLog {
        records,
        users,
        items,
        lines,
        malformed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn movielens_line() {
        let f = write("1::1193::5::978300760\n");
        let log = parse_interactions(f.path(), LogFormat::MovielensDcolon).unwrap();
        assert_eq!(
            log.records,
            vec![InteractionRecord {
                user: 0,
                item: 0,
                rating: Some(5.0),
                timestamp: 978300760
            }]
        );
        assert_eq!(log.users.raw(0), "1");
        assert_eq!(log.items.raw(0), "1193");
    }

    #[test]
    fn empty_file() {
        let f = write("");
        let log = parse_interactions(f.path(), LogFormat::MovielensDcolon).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(log.malformed, 0);
    }

    #[test]
    fn tsv_with_and_without_rating() {
        let f = write("a\tx\t3.5\t10\nb\ty\t7\n");
        let log = parse_interactions(f.path(), LogFormat::Tsv).unwrap();
        assert_eq!(log.records[0].rating, Some(3.5));
        assert_eq!(log.records[1].rating, None);
        assert_eq!(log.records[1].timestamp, 7);
    }

    #[test]
    fn sorted_by_user_then_time() {
        let f = write("2::5::4::30\n1::5::4::20\n2::6::4::10\n1::7::4::5\n");
        let log = parse_interactions(f.path(), LogFormat::MovielensDcolon).unwrap();
        let keys: Vec<(usize, i64)> = log.records.iter().map(|r| (r.user, r.timestamp)).collect();
        assert_eq!(keys, vec![(0, 10), (0, 30), (1, 5), (1, 20)]);
    }

    #[test]
    fn malformed_budget() {
        let mut ok = String::new();
        for i in 0..200 {
            ok.push_str(&format!("1::{i}::4::{i}\n"));
        }
        let f = write(&format!("{ok}garbage\n"));
        let log = parse_interactions(f.path(), LogFormat::MovielensDcolon).unwrap();
        assert_eq!(log.malformed, 1);
        let f = write(&format!("{ok}garbage\nmore::garbage\nx\n"));
        assert!(matches!(
            parse_interactions(f.path(), LogFormat::MovielensDcolon),
            Err(Error::TooManyMalformed { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_interactions(Path::new("/nonexistent/x.dat"), LogFormat::Tsv).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn id_map_text_roundtrip() {
        let mut m = IdMap::default();
        m.intern("42");
        m.intern("7");
        let back = IdMap::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.max_numeric(), Some(42));
    }
}
