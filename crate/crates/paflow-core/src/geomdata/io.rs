//! Line-oriented text format for complex datasets.
//!
//! ```text
//! #paflow-complex v1
//! DIMS elements 6 residues 8 types 8
//! COMPLEX
//! POCKET <n>
//! <x> <y> <z> <label>     one atom per line, label packs (element, residue, backbone)
//! LIGAND <n>
//! <x> <y> <z> <type>
//! AFFINITY <y>
//! ```
//!
//! Coordinates are written with 9 significant digits; datasets produced by
//! the generator are quantized to the same precision, so write → read is an
//! exact round trip.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::{ComplexRecord, FeatureSpec, LigandState, PocketCloud};
use crate::num::Real;

pub const FORMAT_VERSION: &str = "v1";
const MAGIC: &str = "#paflow-complex";

#[derive(Debug, Error)]
pub enum ComplexIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format version {got}, expected {expected}")]
    Version { expected: String, got: String },
}

fn parse_err(line: usize, msg: impl Into<String>) -> ComplexIoError {
    ComplexIoError::Parse { line, msg: msg.into() }
}

pub fn write_complexes<S: Real>(
    path: impl AsRef<Path>,
    features: &FeatureSpec,
    records: &[ComplexRecord<S>],
) -> Result<(), ComplexIoError> {
    let mut out = String::new();
    writeln!(out, "{MAGIC} {FORMAT_VERSION}").expect("string write");
    writeln!(
        out,
        "DIMS elements {} residues {} types {}",
        features.n_elements, features.n_residue_classes, features.n_ligand_types
    )
    .expect("string write");
    for rec in records {
        writeln!(out, "COMPLEX").expect("string write");
        writeln!(out, "POCKET {}", rec.pocket.n_atoms()).expect("string write");
        for (row, feat) in rec.pocket.coords.rows().into_iter().zip(rec.pocket.features.rows()) {
            let label = encode_features(features, feat.as_slice().expect("contiguous row"));
            writeln!(
                out,
                "{:.8e} {:.8e} {:.8e} {label}",
                row[0].to_f64x(),
                row[1].to_f64x(),
                row[2].to_f64x()
            )
            .expect("string write");
        }
        writeln!(out, "LIGAND {}", rec.ligand_ref.n_atoms()).expect("string write");
        for (row, label) in
            rec.ligand_ref.coords.rows().into_iter().zip(rec.ligand_ref.labels())
        {
            writeln!(
                out,
                "{:.8e} {:.8e} {:.8e} {label}",
                row[0].to_f64x(),
                row[1].to_f64x(),
                row[2].to_f64x()
            )
            .expect("string write");
        }
        writeln!(out, "AFFINITY {:.8e}", rec.affinity.to_f64x()).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn encode_features<S: Real>(fs: &FeatureSpec, row: &[S]) -> usize {
    let argmax = |slice: &[S]| {
        slice
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite feature"))
            .map(|(i, _)| i)
            .expect("non-empty block")
    };
    let element = argmax(&row[..fs.n_elements]);
    let residue = argmax(&row[fs.n_elements..fs.n_elements + fs.n_residue_classes]);
    let backbone = row[fs.n_elements + fs.n_residue_classes] > S::of(0.5);
    fs.encode_pocket_label(element, residue, backbone)
}

pub fn read_complexes<S: Real>(
    path: impl AsRef<Path>,
) -> Result<(FeatureSpec, Vec<ComplexRecord<S>>), ComplexIoError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    let (line_no, header) = lines.next().ok_or_else(|| parse_err(1, "empty file, expected header"))?;
    let mut header_parts = header.split_whitespace();
    if header_parts.next() != Some(MAGIC) {
        return Err(parse_err(line_no, format!("expected `{MAGIC} <version>` header")));
    }
    let got = header_parts.next().unwrap_or("").to_string();
    if got != FORMAT_VERSION {
        return Err(ComplexIoError::Version { expected: FORMAT_VERSION.to_string(), got });
    }

    let (line_no, dims) = lines.next().ok_or_else(|| parse_err(2, "missing DIMS line"))?;
    let features = parse_dims(line_no, dims)?;

    let mut records = Vec::new();
    while let Some((line_no, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        if line != "COMPLEX" {
            return Err(parse_err(line_no, format!("expected COMPLEX, got `{line}`")));
        }
        records.push(parse_record(&features, &mut lines)?);
    }
    Ok((features, records))
}

fn parse_dims(line_no: usize, line: &str) -> Result<FeatureSpec, ComplexIoError> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 7 || parts[0] != "DIMS" || parts[1] != "elements" || parts[3] != "residues"
        || parts[5] != "types"
    {
        return Err(parse_err(line_no, "expected `DIMS elements <n> residues <n> types <n>`"));
    }
    let field = |idx: usize, name: &str| {
        parts[idx]
            .parse::<usize>()
            .map_err(|_| parse_err(line_no, format!("field {name}: `{}` is not a count", parts[idx])))
    };
    Ok(FeatureSpec {
        n_elements: field(2, "elements")?,
        n_residue_classes: field(4, "residues")?,
        n_ligand_types: field(6, "types")?,
    })
}

fn parse_record<'a, S: Real>(
    fs: &FeatureSpec,
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
) -> Result<ComplexRecord<S>, ComplexIoError> {
    let (pocket_n, last) = parse_block_header(lines, "POCKET")?;
    let mut pocket_coords = Array2::zeros((pocket_n, 3));
    let mut pocket_features = Array2::zeros((pocket_n, fs.pocket_dim()));
    let mut last_line = last;
    for i in 0..pocket_n {
        let (line_no, x, y, z, label) = parse_atom_line(lines, last_line, "pocket atom")?;
        last_line = line_no;
        let (element, residue, backbone) = fs
            .decode_pocket_label(label)
            .ok_or_else(|| parse_err(line_no, format!("field label: {label} out of range")))?;
        if element >= fs.n_elements || residue >= fs.n_residue_classes {
            return Err(parse_err(line_no, format!("field label: {label} out of range")));
        }
        pocket_coords[(i, 0)] = S::of(x);
        pocket_coords[(i, 1)] = S::of(y);
        pocket_coords[(i, 2)] = S::of(z);
        for (j, v) in fs.pocket_row::<S>(element, residue, backbone).into_iter().enumerate() {
            pocket_features[(i, j)] = v;
        }
    }

    let (ligand_n, last) = parse_block_header_after(lines, last_line, "LIGAND")?;
    let mut ligand_coords = Array2::zeros((ligand_n, 3));
    let mut types = Array2::zeros((ligand_n, fs.n_ligand_types));
    last_line = last;
    for i in 0..ligand_n {
        let (line_no, x, y, z, label) = parse_atom_line(lines, last_line, "ligand atom")?;
        last_line = line_no;
        if label >= fs.n_ligand_types {
            return Err(parse_err(
                line_no,
                format!("field type: {label} exceeds alphabet size {}", fs.n_ligand_types),
            ));
        }
        ligand_coords[(i, 0)] = S::of(x);
        ligand_coords[(i, 1)] = S::of(y);
        ligand_coords[(i, 2)] = S::of(z);
        types[(i, label)] = S::one();
    }

    let (line_no, line) = lines
        .next()
        .ok_or_else(|| parse_err(last_line + 1, "truncated record: expected AFFINITY line"))?;
    let affinity = line
        .strip_prefix("AFFINITY ")
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or_else(|| parse_err(line_no, format!("field affinity: expected `AFFINITY <y>`, got `{line}`")))?;
    if !(0.0..=1.0).contains(&affinity) {
        return Err(parse_err(line_no, format!("field affinity: {affinity} outside [0, 1]")));
    }

    Ok(ComplexRecord {
        pocket: PocketCloud { coords: pocket_coords, features: pocket_features },
        ligand_ref: LigandState::reference(ligand_coords, types),
        affinity: S::of(affinity),
    })
}

fn parse_block_header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    tag: &str,
) -> Result<(usize, usize), ComplexIoError> {
    parse_block_header_after(lines, 0, tag)
}

fn parse_block_header_after<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    prev_line: usize,
    tag: &str,
) -> Result<(usize, usize), ComplexIoError> {
    let (line_no, line) = lines
        .next()
        .ok_or_else(|| parse_err(prev_line + 1, format!("truncated record: expected {tag} block")))?;
    let count = line
        .strip_prefix(tag)
        .and_then(|rest| rest.trim().parse::<usize>().ok())
        .ok_or_else(|| parse_err(line_no, format!("expected `{tag} <count>`, got `{line}`")))?;
    if count == 0 {
        return Err(parse_err(line_no, format!("{tag} block must contain at least one atom")));
    }
    Ok((count, line_no))
}

fn parse_atom_line<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    prev_line: usize,
    what: &str,
) -> Result<(usize, f64, f64, f64, usize), ComplexIoError> {
    let (line_no, line) = lines
        .next()
        .ok_or_else(|| parse_err(prev_line + 1, format!("truncated record: expected {what} line")))?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(parse_err(
            line_no,
            format!("{what}: expected `x y z label`, got {} fields", parts.len()),
        ));
    }
    let coord = |idx: usize, name: &str| -> Result<f64, ComplexIoError> {
        let v = parts[idx]
            .parse::<f64>()
            .map_err(|_| parse_err(line_no, format!("field {name}: `{}` is not a number", parts[idx])))?;
        if !v.is_finite() {
            return Err(parse_err(line_no, format!("field {name}: non-finite coordinate")));
        }
        Ok(v)
    };
    let x = coord(0, "x")?;
    let y = coord(1, "y")?;
    let z = coord(2, "z")?;
    let label = parts[3]
        .parse::<usize>()
        .map_err(|_| parse_err(line_no, format!("field label: `{}` is not an index", parts[3])))?;
    Ok((line_no, x, y, z, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomdata::generate_synthetic_dataset;
    use proptest::prelude::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("paflow-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn empty_list_roundtrips() {
        let path = tmpfile("empty.paflow");
        write_complexes::<f64>(&path, &FeatureSpec::default(), &[]).unwrap();
        let (fs, records) = read_complexes::<f64>(&path).unwrap();
        assert_eq!(fs, FeatureSpec::default());
        assert!(records.is_empty());
    }

    #[test]
    fn generated_dataset_roundtrips_exactly() {
        let (fs, records) = generate_synthetic_dataset::<f64>(12, 77);
        let path = tmpfile("roundtrip.paflow");
        write_complexes(&path, &fs, &records).unwrap();
        let (fs2, back) = read_complexes::<f64>(&path).unwrap();
        assert_eq!(fs, fs2);
        assert_eq!(records, back);
        // Second write is byte-identical.
        let bytes1 = std::fs::read(&path).unwrap();
        write_complexes(&path, &fs2, &back).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let path = tmpfile("version.paflow");
        std::fs::write(&path, "#paflow-complex v9\nDIMS elements 6 residues 8 types 8\n").unwrap();
        match read_complexes::<f64>(&path).unwrap_err() {
            ComplexIoError::Version { expected, got } => {
                assert_eq!(expected, "v1");
                assert_eq!(got, "v9");
            }
            other => panic!("expected version error, got {other}"),
        }
    }

    #[test]
    fn truncated_file_reports_line_number() {
        let (fs, records) = generate_synthetic_dataset::<f64>(1, 5);
        let path = tmpfile("trunc.paflow");
        write_complexes(&path, &fs, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, cut).unwrap();
        match read_complexes::<f64>(&path).unwrap_err() {
            ComplexIoError::Parse { line, msg } => {
                assert_eq!(line, 7);
                assert!(msg.contains("truncated") || msg.contains("expected"), "{msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn malformed_atom_line_names_field() {
        let path = tmpfile("badfield.paflow");
        std::fs::write(
            &path,
            "#paflow-complex v1\nDIMS elements 6 residues 8 types 8\nCOMPLEX\nPOCKET 1\n1.0 oops 3.0 2\n",
        )
        .unwrap();
        match read_complexes::<f64>(&path).unwrap_err() {
            ComplexIoError::Parse { line, msg } => {
                assert_eq!(line, 5);
                assert!(msg.contains("field y"), "{msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_is_identity(seed in 0u64..100_000, n in 1usize..6) {
            let (fs, records) = generate_synthetic_dataset::<f64>(n, seed);
            let path = tmpfile(&format!("prop-{seed}-{n}.paflow"));
            write_complexes(&path, &fs, &records).unwrap();
            let (fs2, back) = read_complexes::<f64>(&path).unwrap();
            prop_assert_eq!(fs, fs2);
            prop_assert_eq!(records, back);
        }
    }
}
