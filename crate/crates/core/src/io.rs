//! Text serialization: matrices as nested JSON rows and JointTables as
//! labelled CSV. Floats are written with 17 significant digits so every
//! value round-trips bit-exactly.

use ndarray::Array2;

use crate::dist::JointTable;
use crate::error::{Error, Result};

pub fn matrix_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Parse("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, m), flat).map_err(|e| Error::Parse(e.to_string()))
}

/// `#[serde(with = "crate::io::mat")]` for `Array2<f64>` fields.
pub mod mat {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::matrix_to_rows(a).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::rows_to_matrix(&rows).map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "crate::io::vec1")]` for `Array1<f64>` fields.
pub mod vec1 {
    use ndarray::Array1;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        a.to_vec().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        Ok(Array1::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Format with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with a header of column labels and a leading label column.
/// Missing labels are written as `x0, x1, …` and `y0, y1, …`.
pub fn joint_to_csv(j: &JointTable) -> String {
    let lx: Vec<String> = match j.labels_x() {
        Some(l) => l.to_vec(),
        None => (0..j.n()).map(|i| format!("x{i}")).collect(),
    };
    let ly: Vec<String> = match j.labels_y() {
        Some(l) => l.to_vec(),
        None => (0..j.m()).map(|i| format!("y{i}")).collect(),
    };
    let mut out = String::new();
    out.push_str("label");
    for l in &ly {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, row) in j.p().rows().into_iter().enumerate() {
        out.push_str(&lx[i]);
        for v in row {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn joint_from_csv(text: &str) -> Result<JointTable> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty csv".into()))?;
    let labels_y: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
    let mut labels_x = Vec::new();
    let mut rows = Vec::new();
    for line in lines {
        let mut cells = line.split(',');
        labels_x.push(cells.next().unwrap_or("").trim().to_string());
        let row = cells
            .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{c}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let mut j = JointTable::new(rows_to_matrix(&rows)?)?;
    j.set_labels(Some(labels_x), Some(labels_y))?;
    Ok(j)
}

pub fn joint_to_json(j: &JointTable) -> String {
    serde_json::to_string_pretty(j).expect("table serializes")
}

pub fn joint_from_json(text: &str) -> Result<JointTable> {
    Ok(serde_json::from_str(text)?)
}

/// A plain numeric matrix as CSV with a `c0,c1,…` header.
pub fn matrix_to_csv(a: &Array2<f64>) -> String {
    let mut out = (0..a.ncols()).map(|i| format!("c{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in a.rows() {
        out.push_str(&row.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Parse a numeric CSV; a first line that does not parse as numbers is
/// treated as a header.
pub fn matrix_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("line {}: {e}", i + 1))),
        }
    }
    rows_to_matrix(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let j = dist::random_table(3, 5, 11);
        let back = joint_from_csv(&joint_to_csv(&j)).unwrap();
        assert!(j.p().iter().zip(back.p().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.labels_y().unwrap()[4], "y4");
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut j = dist::random_table(4, 2, 5);
        j.set_labels(None, Some(vec!["a".into(), "b".into()])).unwrap();
        let back = joint_from_json(&joint_to_json(&j)).unwrap();
        assert_eq!(back, j);
    }
}
