//! Python bindings for the core pipeline: lexicon access, glyph/line
//! rendering, the trained recognizer, and the sequence metrics.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use radicalign::clip::{self, CandidateMatrix, ClipModel};
use radicalign::ctr::CtrModel;
use radicalign::eval;
use radicalign::glyph::{self, RadicalBitmap, StyleParams, StyleRegime};
use radicalign::ids::{self, DecompositionLevel, Token};
use radicalign::seed;

fn err(e: radicalign::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_tokens(s: &str) -> PyResult<Vec<Token>> {
    s.split_whitespace()
        .map(|t| Token::from_str(t).map_err(err))
        .collect()
}

/// Parse a space-separated IDS body (no END) and return its canonical
/// serialization including the END marker.
#[pyfunction]
fn ids_round_trip(s: &str) -> PyResult<String> {
    let toks = parse_tokens(s)?;
    let tree = ids::parse_ids(&toks).map_err(err)?;
    Ok(ids::ids_string(&tree))
}

#[pyfunction]
fn edit_distance(a: Vec<usize>, b: Vec<usize>) -> usize {
    eval::edit_distance(&a, &b)
}

#[pyfunction]
fn cacc(preds: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    eval::cacc(&preds, &labels).map_err(err)
}

#[pyfunction]
fn lacc(preds: Vec<Vec<usize>>, labels: Vec<Vec<usize>>) -> PyResult<f64> {
    eval::lacc(&preds, &labels).map_err(err)
}

#[pyfunction]
fn ned(preds: Vec<Vec<usize>>, labels: Vec<Vec<usize>>) -> PyResult<f64> {
    eval::ned(&preds, &labels).map_err(err)
}

#[pyclass(name = "Lexicon")]
struct PyLexicon {
    inner: ids::Lexicon,
    bitmaps: Vec<RadicalBitmap>,
}

#[pymethods]
impl PyLexicon {
    /// Procedurally generate a lexicon (same generator as `lexicon build`).
    #[staticmethod]
    fn generate(classes: usize, radicals: usize, max_depth: usize, seed: u64) -> Self {
        let inner = ids::generate_lexicon(classes, radicals, max_depth, seed);
        let bitmaps = glyph::radical_inventory(inner.radical_count());
        PyLexicon { inner, bitmaps }
    }

    /// Load from a lexicon directory (lexicon.tsv + strokes.tsv).
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let dir = std::path::Path::new(dir);
        let inner =
            ids::Lexicon::load(&dir.join("lexicon.tsv"), &dir.join("strokes.tsv")).map_err(err)?;
        let bitmaps = glyph::radical_inventory(inner.radical_count());
        Ok(PyLexicon { inner, bitmaps })
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    #[getter]
    fn radical_count(&self) -> usize {
        self.inner.radical_count()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Canonical IDS token string for a class, END included.
    fn ids(&self, class_id: usize) -> PyResult<String> {
        Ok(ids::ids_string(self.inner.tree(class_id).map_err(err)?))
    }

    fn name(&self, class_id: usize) -> PyResult<String> {
        Ok(self.inner.name(class_id).map_err(err)?.to_string())
    }

    /// Render one 32x32 glyph; returns a flat row-major float list in [0,1].
    #[pyo3(signature = (class_id, seed_v, regime="printed"))]
    fn glyph(&self, class_id: usize, seed_v: u64, regime: &str) -> PyResult<Vec<f32>> {
        let regime = StyleRegime::from_str(regime).map_err(err)?;
        let mut rng = seed::rng(seed_v);
        let style = StyleParams::sample(regime, &mut rng);
        let img = glyph::glyph_for_class(&self.inner, &self.bitmaps, class_id, &style, seed_v)
            .map_err(err)?;
        Ok(img.pixels)
    }

    /// Render a 32x256 text line over the given class ids.
    #[pyo3(signature = (class_ids, seed_v, regime="printed"))]
    fn line(&self, class_ids: Vec<usize>, seed_v: u64, regime: &str) -> PyResult<Vec<f32>> {
        let regime = StyleRegime::from_str(regime).map_err(err)?;
        let mut rng = seed::rng(seed_v);
        let style = StyleParams::sample(regime, &mut rng);
        let img = glyph::render_line(&class_ids, &self.inner, &self.bitmaps, &style, seed_v)
            .map_err(err)?;
        Ok(img.pixels)
    }
}

/// Trained dual encoder plus a candidate matrix: single-glyph recognition
/// and raw embedding access.
#[pyclass(name = "Recognizer")]
struct PyRecognizer {
    model: ClipModel,
    candidates: CandidateMatrix,
}

#[pymethods]
impl PyRecognizer {
    #[staticmethod]
    fn load(checkpoint: &str, candidates: &str) -> PyResult<Self> {
        let model = ClipModel::load(std::path::Path::new(checkpoint)).map_err(err)?;
        let candidates =
            CandidateMatrix::load(std::path::Path::new(candidates)).map_err(err)?;
        Ok(PyRecognizer { model, candidates })
    }

    #[getter]
    fn candidate_count(&self) -> usize {
        self.candidates.len()
    }

    /// Nearest-candidate class id for one 32x32 glyph.
    fn recognize(&self, pixels: Vec<f32>) -> PyResult<usize> {
        clip::ccr_recognize(&self.model, &pixels, &self.candidates).map_err(err)
    }

    fn encode_image(&self, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        Ok(self.model.encode_image(&pixels).map_err(err)?.data)
    }

    /// Embed an IDS token string (END appended when missing) using the
    /// lexicon's vocabulary.
    fn encode_text(&self, lex: &PyLexicon, ids_str: &str) -> PyResult<Vec<f32>> {
        let mut toks = parse_tokens(ids_str)?;
        if toks.last() != Some(&Token::End) {
            toks.push(Token::End);
        }
        Ok(self.model.encode_text(&lex.inner, &toks).map_err(err)?.data)
    }

    /// Canonical representation of a class from the lexicon.
    fn encode_class(&self, lex: &PyLexicon, class_id: usize) -> PyResult<Vec<f32>> {
        let toks = lex
            .inner
            .tokens_for_level(class_id, DecompositionLevel::Radical)
            .map_err(err)?;
        Ok(self.model.encode_text(&lex.inner, &toks).map_err(err)?.data)
    }
}

/// Trained line recognizer plus candidates: greedy decoding from Python.
#[pyclass(name = "LineRecognizer")]
struct PyLineRecognizer {
    model: CtrModel,
    candidates: CandidateMatrix,
}

#[pymethods]
impl PyLineRecognizer {
    #[staticmethod]
    fn load(checkpoint: &str, candidates: &str) -> PyResult<Self> {
        let model = CtrModel::load(std::path::Path::new(checkpoint)).map_err(err)?;
        let candidates =
            CandidateMatrix::load(std::path::Path::new(candidates)).map_err(err)?;
        Ok(PyLineRecognizer { model, candidates })
    }

    /// Decode one 32x256 line; returns (class_ids, truncated).
    fn decode(&self, pixels: Vec<f32>) -> PyResult<(Vec<usize>, bool)> {
        let r = self.model.greedy_decode(&self.candidates, &pixels).map_err(err)?;
        Ok((r.classes, r.truncated))
    }
}

#[pymodule]
fn radicalign_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLexicon>()?;
    m.add_class::<PyRecognizer>()?;
    m.add_class::<PyLineRecognizer>()?;
    m.add_function(wrap_pyfunction!(ids_round_trip, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(cacc, m)?)?;
    m.add_function(wrap_pyfunction!(lacc, m)?)?;
    m.add_function(wrap_pyfunction!(ned, m)?)?;
    Ok(())
}
