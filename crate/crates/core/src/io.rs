//! Dataset CSV and model files.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::CcmeModel;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Header `x1..xd,a,y` (or `y1..yk` for several outcome columns).
pub fn dataset_header(x_dim: usize, y_dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=x_dim).map(|j| format!("x{j}")).collect();
    h.push("a".into());
    if y_dim == 1 {
        h.push("y".into());
    } else {
        h.extend((1..=y_dim).map(|k| format!("y{k}")));
    }
    h
}

pub fn write_dataset_csv<T: Scalar, W: Write>(out: W, data: &Dataset<T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(dataset_header(data.x_dim(), data.y_dim()))?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.a[i].to_string());
        rec.extend(data.y.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written in the layout of [`dataset_header`]. Column names
/// are checked, so a file with a missing or reordered column is rejected.
pub fn read_dataset_csv<T: Scalar, R: Read>(input: R) -> Result<Dataset<T>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let a_pos = header
        .iter()
        .position(|h| h == "a")
        .ok_or_else(|| Error::Parse("dataset header has no `a` column".into()))?;
    let x_dim = a_pos;
    let y_dim = header.len() - a_pos - 1;
    if x_dim == 0 || y_dim == 0 || header != dataset_header(x_dim, y_dim) {
        return Err(Error::Parse(format!(
            "dataset header must read x1..xd,a,y (or y1..yk), got {}",
            header.join(",")
        )));
    }
    let (mut xs, mut a, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut vals = Vec::with_capacity(header.len());
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: cannot parse {field:?} as a number", line + 1)))?;
            vals.push(T::lit(v));
        }
        xs.extend_from_slice(&vals[..x_dim]);
        a.push(vals[x_dim]);
        ys.extend_from_slice(&vals[x_dim + 1..]);
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::Parse("dataset has no rows".into()));
    }
    Dataset::new(Matrix::new(n, x_dim, xs)?, a, Matrix::new(n, y_dim, ys)?)
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ModelFile<T> {
    schema_version: u32,
    scalar: String,
    model: CcmeModel<T>,
}

#[derive(Deserialize)]
struct FileHead {
    schema_version: u32,
    scalar: String,
}

/// Writes a model as JSON. Floats are written with round-trip precision.
pub fn save_model<T: Scalar, W: Write>(out: W, model: &CcmeModel<T>) -> Result<()> {
    let file = ModelFile { schema_version: MODEL_SCHEMA_VERSION, scalar: T::NAME.to_string(), model: model.clone() };
    serde_json::to_writer(out, &file)?;
    Ok(())
}

/// Scalar type name (`"f32"` or `"f64"`) recorded in a model file.
pub fn model_precision(text: &str) -> Result<String> {
    let head: FileHead = serde_json::from_str(text)?;
    Ok(head.scalar)
}

pub fn load_model<T: Scalar, R: Read>(mut input: R) -> Result<CcmeModel<T>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let head: FileHead = serde_json::from_str(&text)?;
    if head.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "model schema version {} is not supported (expected {MODEL_SCHEMA_VERSION})",
            head.schema_version
        )));
    }
    if head.scalar != T::NAME {
        return Err(Error::Parse(format!("model was saved as {}, requested {}", head.scalar, T::NAME)));
    }
    let file: ModelFile<T> = serde_json::from_str(&text)?;
    Ok(file.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{fit, Hyperparams, Method, Variant};
    use crate::synth::{generate, DgpConfig, Scenario};

    #[test]
    fn dataset_round_trip_is_exact() {
        let (d, _) = generate(&DgpConfig::new(40, 1, Scenario::BothCorrect)).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,x3,x4,x5,x6,x7,x8,x9,x10,a,y\n"));
        assert_eq!(text.lines().count(), 41);
        assert_eq!(read_dataset_csv::<f64, _>(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn multi_outcome_and_bad_files() {
        let d = Dataset::new(Matrix::column(vec![1.0, 2.0]), vec![1.0, 0.0], Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &d).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("x1,a,y1,y2\n"));
        assert_eq!(read_dataset_csv::<f64, _>(buf.as_slice()).unwrap(), d);
        for bad in ["x1,y\n1,2\n", "x1,a,y\n1,0,zz\n", "x1,a,y\n1,0.5,2\n", "x2,a,y\n1,1,2\n", "x1,a,y\n", "x1,a,y\n1,1\n"] {
            assert!(read_dataset_csv::<f64, _>(bad.as_bytes()).is_err(), "{bad}");
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let (d, _) = generate(&DgpConfig::new(120, 2, Scenario::BothCorrect)).unwrap();
        let mut hp = Hyperparams { method: Method::Df, variant: Variant::Dr, features: 4, hidden: vec![5], ..Default::default() };
        hp.df.stage1.epochs = 5;
        hp.df.stage2.epochs = 5;
        hp.forest.n_trees = 3;
        let model = fit(&d, &hp, 9).unwrap();
        let mut buf = Vec::new();
        save_model(&mut buf, &model).unwrap();
        let back: CcmeModel<f64> = load_model(buf.as_slice()).unwrap();
        let vs = d.x.select_cols(&[0, 1, 2, 3, 4]);
        let ys = Matrix::column(vec![-3.0, 5.0, 20.0]);
        let a = model.values(&vs, &ys).unwrap();
        let b = back.values(&vs, &ys).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let mut again = Vec::new();
        save_model(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        assert!(load_model::<f32, _>(buf.as_slice()).is_err());
        assert_eq!(model_precision(std::str::from_utf8(&buf).unwrap()).unwrap(), "f64");
        let text = String::from_utf8(buf).unwrap().replacen("\"schema_version\":1", "\"schema_version\":99", 1);
        assert!(load_model::<f64, _>(text.as_bytes()).is_err());
    }
}
