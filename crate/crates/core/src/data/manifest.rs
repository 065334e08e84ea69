//! Line-oriented `key=value` records with `#` comments. Key order is kept so
//! written files are byte-stable.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: expected key=value", no + 1),
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn get_str<'a>(&'a self, path: &Path, key: &str) -> Result<&'a str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("missing key {key}"),
            })
    }

    pub fn get<T: FromStr>(&self, path: &Path, key: &str) -> Result<T> {
        let raw = self.get_str(path, key)?;
        raw.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: format!("cannot parse {key}={raw}"),
        })
    }

    pub fn get_list<T: FromStr>(&self, path: &Path, key: &str) -> Result<Vec<T>> {
        let raw = self.get_str(path, key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("cannot parse list item {s:?} of {key}"),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_lookup() {
        let p = Path::new("m.txt");
        let m = Manifest::parse("# c\na = 1\nb=x,y\n\n", p).unwrap();
        assert_eq!(m.get::<u32>(p, "a").unwrap(), 1);
        assert_eq!(m.get_list::<String>(p, "b").unwrap(), vec!["x", "y"]);
        assert!(m.get_str(p, "c").is_err());
        assert!(Manifest::parse("novalue\n", p).is_err());
    }
}
