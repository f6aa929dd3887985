//! Line-delimited dataset files.
//!
//! The first line is a header object carrying the schema version, split and
//! class vocabulary; every following line is one [`InstanceRecord`].

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, InstanceRecord, Split};
use crate::{Error, Result};

pub const SCHEMA_VERSION: &str = "exclusion-search/v1";

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    split: Split,
    class_vocabulary: Vec<String>,
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        schema: SCHEMA_VERSION.to_string(),
        split: ds.split(),
        class_vocabulary: ds.class_vocabulary().to_vec(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in ds.records() {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let reader = BufReader::new(r);
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    let mut keys = HashSet::new();
    let mut d_in = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: lineno, msg };
        match &header {
            None => {
                let h: Header = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                if h.schema != SCHEMA_VERSION {
                    return Err(parse_err(format!("unsupported schema `{}`", h.schema)));
                }
                header = Some(h);
            }
            Some(h) => {
                let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                if !h.class_vocabulary.contains(&rec.class_label) {
                    return Err(parse_err(Error::UnknownClass(rec.class_label).to_string()));
                }
                let width = *d_in.get_or_insert(rec.features.len());
                rec.validate(width).map_err(|e| parse_err(e.to_string()))?;
                if !keys.insert(rec.key()) {
                    return Err(parse_err(format!(
                        "duplicate (instance {}, frame {})",
                        rec.instance_id, rec.frame_id
                    )));
                }
                records.push(rec);
            }
        }
    }
    match header {
        None => Dataset::new(Split::Train, Vec::new(), Vec::new()),
        Some(h) => Dataset::new(h.split, h.class_vocabulary, records),
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"schema":"exclusion-search/v1","split":"test","class_vocabulary":["person","car"]}"#;

    #[test]
    fn empty_input_is_empty_dataset() {
        let ds = read_dataset("".as_bytes()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn identity_on_non_person_rejected_with_line_number() {
        let text = format!(
            "{HEADER}\n{}\n",
            r#"{"instance_id":1,"frame_id":0,"class_label":"car","identity_label":"p1","region":{"bbox":[0,0,2,2]},"features":[1.0]}"#
        );
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("identity_label"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_unknown_class_lines() {
        let text = format!("{HEADER}\n{{\"instance_id\": 1,\n");
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));

        let text = format!(
            "{HEADER}\n{}\n",
            r#"{"instance_id":1,"frame_id":0,"class_label":"boat","identity_label":null,"region":{"bbox":[0,0,2,2]},"features":[1.0]}"#
        );
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("boat")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mask_regions_survive_round_trip() {
        let text = format!(
            "{HEADER}\n{}\n",
            r#"{"instance_id":1,"frame_id":0,"class_label":"car","identity_label":null,"region":{"mask":{"height":2,"width":3,"rle":[1,2,3]}},"features":[0.5,-0.25]}"#
        );
        let ds = read_dataset(text.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }
}
