//! Serialization of fitted models and reports to human-readable JSON.
//!
//! Floating-point numbers are written with 17 significant digits, which
//! round-trips every finite f64 exactly: `parse(serialize(doc)) == doc`
//! bit for bit, including the zero pattern of structured matrices.

use crate::error::{Error, Result};
use crate::inference::InferenceReport;
use crate::matexp::SquareMatrix;
use crate::phase::{
    InhomogeneityTransform, MarkovStructure, PhaseTypeLaw, StructureKind, TransformFamily,
};
use crate::regression::{FitReport, Link, RegressionModel};
use crate::simstudy::ComparisonTable;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Model document
// ---------------------------------------------------------------------------

/// Fit metadata embedded in a model document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub n: usize,
    pub loglik: f64,
    pub df: usize,
    pub aic: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
}

/// On-disk representation of a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub structure: String,
    pub phases: usize,
    pub pi: Vec<f64>,
    pub sub_intensity: Vec<Vec<f64>>,
    pub family: String,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub covariates: Vec<String>,
    pub link: String,
    pub response: Option<String>,
    pub fit: Option<FitMeta>,
}

impl ModelDocument {
    pub fn from_model(
        model: &RegressionModel,
        covariates: &[String],
        response: Option<String>,
        fit: Option<FitMeta>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            structure: model.law.structure().kind().as_str().to_string(),
            phases: model.law.phases(),
            pi: model.law.initial().to_vec(),
            sub_intensity: model.law.sub_intensity().rows(),
            family: model.transform.family().as_str().to_string(),
            theta: model.transform.theta(),
            beta: model.beta.clone(),
            covariates: covariates.to_vec(),
            link: model.link.as_str().to_string(),
            response,
            fit,
        }
    }

    pub fn from_fit(
        model: &RegressionModel,
        covariates: &[String],
        response: Option<String>,
        report: &FitReport,
    ) -> Self {
        Self::from_model(
            model,
            covariates,
            response,
            Some(FitMeta {
                n: report.n,
                loglik: report.loglik,
                df: report.df,
                aic: report.aic,
                bic: report.bic,
                iterations: report.iterations,
                converged: report.converged,
                seed: report.seed,
            }),
        )
    }

    /// Rebuilds the model, re-validating every law invariant.
    pub fn to_model(&self) -> Result<RegressionModel> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Document(format!(
                "schema version {} not supported (expected {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        if self.beta.len() != self.covariates.len() {
            return Err(Error::Document(format!(
                "{} coefficients but {} covariate names",
                self.beta.len(),
                self.covariates.len()
            )));
        }
        let structure =
            MarkovStructure::new(StructureKind::parse(&self.structure)?, self.phases)?;
        let t = SquareMatrix::from_rows(&self.sub_intensity)?;
        let law = PhaseTypeLaw::new(self.pi.clone(), t, structure)?;
        let transform =
            InhomogeneityTransform::from_family(TransformFamily::parse(&self.family)?, &self.theta)?;
        let link = Link::parse(&self.link)?;
        RegressionModel::new(law, transform, self.beta.clone(), link)
    }

    pub fn to_json(&self) -> Result<String> {
        to_json_17(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Document(format!(
                "schema version {} not supported (expected {})",
                doc.schema_version, SCHEMA_VERSION
            )));
        }
        Ok(doc)
    }
}

// ---------------------------------------------------------------------------
// Fit report document
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReportDocument {
    pub schema_version: u32,
    pub seed: u64,
    pub n: usize,
    pub response: Option<String>,
    pub covariates: Vec<String>,
    pub structure: String,
    pub phases: usize,
    pub family: String,
    pub link: String,
    pub iterations: usize,
    pub converged: bool,
    pub inner_fallbacks: usize,
    pub loglik: f64,
    pub df: usize,
    pub aic: f64,
    pub bic: f64,
    pub loglik_trace: Vec<f64>,
    pub inference: Option<InferenceReport>,
}

impl FitReportDocument {
    pub fn new(
        model: &RegressionModel,
        covariates: &[String],
        response: Option<String>,
        report: &FitReport,
        inference: Option<InferenceReport>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: report.seed,
            n: report.n,
            response,
            covariates: covariates.to_vec(),
            structure: model.law.structure().kind().as_str().to_string(),
            phases: model.law.phases(),
            family: model.transform.family().as_str().to_string(),
            link: model.link.as_str().to_string(),
            iterations: report.iterations,
            converged: report.converged,
            inner_fallbacks: report.inner_fallbacks,
            loglik: report.loglik,
            df: report.df,
            aic: report.aic,
            bic: report.bic,
            loglik_trace: report.loglik_trace.clone(),
            inference,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        to_json_17(self)
    }
}

/// Comparison tables reuse the same 17-digit document encoding.
pub fn comparison_to_json(table: &ComparisonTable) -> Result<String> {
    to_json_17(table)
}

// ---------------------------------------------------------------------------
// 17-significant-digit JSON
// ---------------------------------------------------------------------------

/// Pretty JSON with floats at 17 significant digits.
pub fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut out, Digits17::new());
    value.serialize(&mut ser).map_err(|e| Error::Document(e.to_string()))?;
    String::from_utf8(out).map_err(|e| Error::Document(e.to_string()))
}

/// Pretty formatter whose only deviation from the default is the float
/// encoding: `{:.16e}` prints 17 significant digits, enough to make the
/// decimal text round-trip every finite f64 exactly.
struct Digits17 {
    indent: usize,
    has_value: bool,
}

impl Digits17 {
    fn new() -> Self {
        Self { indent: 0, has_value: false }
    }

    fn newline<W: ?Sized + Write>(&self, writer: &mut W) -> std::io::Result<()> {
        writer.write_all(b"\n")?;
        for _ in 0..self.indent {
            writer.write_all(b"  ")?;
        }
        Ok(())
    }
}

impl serde_json::ser::Formatter for Digits17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        write!(writer, "{:.16e}", value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.indent += 1;
        self.has_value = false;
        writer.write_all(b"[")
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.indent -= 1;
        if self.has_value {
            self.newline(writer)?;
        }
        writer.write_all(b"]")
    }

    fn begin_array_value<W: ?Sized + Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        if !first {
            writer.write_all(b",")?;
        }
        self.newline(writer)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, _writer: &mut W) -> std::io::Result<()> {
        self.has_value = true;
        Ok(())
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.indent += 1;
        self.has_value = false;
        writer.write_all(b"{")
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.indent -= 1;
        if self.has_value {
            self.newline(writer)?;
        }
        writer.write_all(b"}")
    }

    fn begin_object_key<W: ?Sized + Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        if !first {
            writer.write_all(b",")?;
        }
        self.newline(writer)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        writer.write_all(b": ")
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, _writer: &mut W) -> std::io::Result<()> {
        self.has_value = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::build_structure;

    fn sample_model(seed: u64) -> RegressionModel {
        let structure = MarkovStructure::new(StructureKind::Coxian, 3).unwrap();
        let law = build_structure(structure, seed, 2.0).unwrap();
        RegressionModel::new(
            law,
            InhomogeneityTransform::pareto(1.7).unwrap(),
            vec![-0.9, 0.25],
            Link::Exp,
        )
        .unwrap()
    }

    #[test]
    fn document_roundtrip_is_exact() {
        let model = sample_model(3);
        let doc = ModelDocument::from_model(
            &model,
            &["X1".into(), "X2".into()],
            Some("y".into()),
            Some(FitMeta {
                n: 100,
                loglik: -321.0987654321,
                df: 8,
                aic: 658.2,
                bic: 679.1,
                iterations: 42,
                converged: true,
                seed: 3,
            }),
        );
        let text = doc.to_json().unwrap();
        let parsed = ModelDocument::from_json(&text).unwrap();
        assert_eq!(doc, parsed);
        // and serializing again is byte-identical
        assert_eq!(text, parsed.to_json().unwrap());
    }

    #[test]
    fn zero_pattern_survives_roundtrip_bitwise() {
        let model = sample_model(9);
        let doc = ModelDocument::from_model(&model, &["X1".into(), "X2".into()], None, None);
        let parsed = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
        let rebuilt = parsed.to_model().unwrap();
        let (a, b) = (model.law.sub_intensity(), rebuilt.law.sub_intensity());
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(a[(r, c)].to_bits(), b[(r, c)].to_bits());
            }
        }
    }

    #[test]
    fn schema_version_is_enforced() {
        let model = sample_model(1);
        let doc = ModelDocument::from_model(&model, &["X1".into(), "X2".into()], None, None);
        let text = doc.to_json().unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(matches!(ModelDocument::from_json(&text), Err(Error::Document(_))));
    }

    #[test]
    fn loaded_law_is_revalidated() {
        let model = sample_model(2);
        let mut doc = ModelDocument::from_model(&model, &["X1".into(), "X2".into()], None, None);
        doc.sub_intensity[0][0] = 5.0; // invalid positive diagonal
        let text = doc.to_json().unwrap();
        let parsed = ModelDocument::from_json(&text).unwrap();
        assert!(parsed.to_model().is_err());
    }

    #[test]
    fn seventeen_digit_floats() {
        #[derive(Serialize)]
        struct V {
            x: f64,
        }
        let text = to_json_17(&V { x: std::f64::consts::PI }).unwrap();
        assert!(text.contains("3.1415926535897931e0"), "{text}");
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["x"].as_f64().unwrap(), std::f64::consts::PI);
    }
}
