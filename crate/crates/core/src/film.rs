//! Feature-wise linear modulation.
//!
//! A per-site two-layer perceptron maps a one-hot metadata vector `z` to a
//! per-channel scale `gamma(z)` and shift `beta(z)`, which are applied to a
//! feature map as `gamma(z) * x + beta(z)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result, TensorError};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::{Scalar, Tensor};

/// Ordered category names for the conditioning metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary(Vec<String>);

impl Vocabulary {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::Validation(format!("vocabulary needs at least two labels, got {labels:?}")));
        }
        for (i, label) in labels.iter().enumerate() {
            if labels[..i].contains(label) {
                return Err(Error::Validation(format!("duplicate vocabulary label {label:?}")));
            }
        }
        Ok(Vocabulary(labels))
    }

    /// The contrast vocabulary `["T2w", "T2star"]`.
    pub fn contrasts() -> Self {
        Vocabulary(vec!["T2w".into(), "T2star".into()])
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.0.iter().position(|l| l == label).ok_or_else(|| Error::UnknownLabel {
            label: label.to_string(),
            known: self.0.clone(),
        })
    }

    /// One-hot encoding of `label`.
    pub fn encode(&self, label: &str) -> Result<ConditioningVector> {
        let index = self.index_of(label)?;
        Ok(ConditioningVector { index, len: self.len() })
    }

    /// Fails unless `other` lists the same labels in the same order.
    pub fn ensure_matches(&self, other: &Vocabulary) -> Result<()> {
        if self != other {
            return Err(Error::VocabularyMismatch { expected: self.0.clone(), found: other.0.clone() });
        }
        Ok(())
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Vocabulary::new(labels)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.0
    }
}

/// A validated one-hot vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditioningVector {
    index: usize,
    len: usize,
}

impl ConditioningVector {
    /// Accepts only vectors of length >= 2 with a single 1 and zeros elsewhere.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Validation(format!("conditioning vector needs length >= 2, got {}", values.len())));
        }
        let ones: Vec<usize> = values.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        let zeros = values.iter().filter(|&&v| v == 0.0).count();
        if ones.len() != 1 || zeros != values.len() - 1 {
            return Err(Error::Validation(format!("conditioning vector {values:?} is not one-hot")));
        }
        Ok(ConditioningVector { index: ones[0], len: values.len() })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len).map(|i| if i == self.index { 1.0 } else { 0.0 }).collect()
    }

    /// Stacks conditioning vectors into a `[N, C]` tensor.
    pub fn batch<T: Scalar>(zs: &[ConditioningVector]) -> Result<Tensor<T>> {
        let width = zs.first().map(|z| z.len).ok_or_else(|| Error::Usage("empty conditioning batch".into()))?;
        if let Some(z) = zs.iter().find(|z| z.len != width) {
            return Err(TensorError::dim("conditioning", format!("widths {} and {} differ", width, z.len)).into());
        }
        let mut data = vec![T::zero(); zs.len() * width];
        for (row, z) in zs.iter().enumerate() {
            data[row * width + z.index] = T::one();
        }
        Ok(Tensor::new(&[zs.len(), width], data)?)
    }
}

/// Per-channel modulation for one site.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Shape and parameter naming of one site's generator.
///
/// `gamma = Wg relu(Wh z + bh) + bg`, `beta = Wb relu(Wh z + bh) + bb`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilmGenerator {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub channels: usize,
}

impl FilmGenerator {
    pub fn new(site: usize, input: usize, hidden: usize, channels: usize) -> Self {
        FilmGenerator { prefix: format!("film.{site}.gen"), input, hidden, channels }
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// `(name, shape)` of every generator tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (self.name("h.weight"), vec![self.hidden, self.input]),
            (self.name("h.bias"), vec![self.hidden]),
            (self.name("gamma.weight"), vec![self.channels, self.hidden]),
            (self.name("gamma.bias"), vec![self.channels]),
            (self.name("beta.weight"), vec![self.channels, self.hidden]),
            (self.name("beta.bias"), vec![self.channels]),
        ]
    }

    /// Records the generator on `tape` for a `[N, C]` batch of conditioning rows.
    /// Returns `[N, channels]` handles for gamma and beta.
    pub fn record<T: Scalar>(&self, tape: &mut Tape<T>, params: &BoundParams, z: Var) -> Result<(Var, Var), TensorError> {
        let width = tape.value(z).shape().get(1).copied().unwrap_or(0);
        if width != self.input {
            return Err(TensorError::dim(
                "film_generate",
                format!("conditioning width {width} does not match generator input {}", self.input),
            ));
        }
        let pre = tape.linear(z, params.get(&self.name("h.weight"))?, params.get(&self.name("h.bias"))?)?;
        let hidden = tape.relu(pre)?;
        let gamma = tape.linear(hidden, params.get(&self.name("gamma.weight"))?, params.get(&self.name("gamma.bias"))?)?;
        let beta = tape.linear(hidden, params.get(&self.name("beta.weight"))?, params.get(&self.name("beta.bias"))?)?;
        Ok((gamma, beta))
    }

    /// Evaluates the generator for a single conditioning vector.
    pub fn generate<T: Scalar>(&self, params: &ModelParams<T>, z: &ConditioningVector) -> Result<FilmParams<T>> {
        let mut tape = Tape::new();
        let mut sub = ModelParams::new();
        for (name, _) in self.param_shapes() {
            let t = params
                .get(&name)
                .ok_or_else(|| TensorError::Usage(format!("generator parameter {name:?} missing")))?;
            sub.insert(name, t.clone());
        }
        let bound = sub.bind(&mut tape);
        let zt = tape.constant(ConditioningVector::batch(std::slice::from_ref(z))?);
        let (gamma, beta) = self.record(&mut tape, &bound, zt)?;
        Ok(FilmParams { gamma: tape.value(gamma).data().to_vec(), beta: tape.value(beta).data().to_vec() })
    }
}

/// `gamma[c] * x[n,c,i,j] + beta[c]` for a plain tensor.
pub fn film_modulate<T: Scalar>(x: &Tensor<T>, p: &FilmParams<T>) -> Result<Tensor<T>, TensorError> {
    let mut tape = Tape::new();
    let c = x.dims4("film_modulate")?[1];
    if p.gamma.len() != c || p.beta.len() != c {
        return Err(TensorError::dim(
            "film_modulate",
            format!("{} channels but gamma/beta lengths {}/{}", c, p.gamma.len(), p.beta.len()),
        ));
    }
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::new(&[c], p.gamma.clone())?);
    let b = tape.constant(Tensor::new(&[c], p.beta.clone())?);
    let y = tape.channel_affine(xv, g, b)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_contrasts() {
        let v = Vocabulary::contrasts();
        assert_eq!(v.encode("T2w").unwrap().values(), vec![1.0, 0.0]);
        assert_eq!(v.encode("T2star").unwrap().values(), vec![0.0, 1.0]);
        match v.encode("FLAIR") {
            Err(Error::UnknownLabel { label, known }) => {
                assert_eq!(label, "FLAIR");
                assert_eq!(known, vec!["T2w", "T2star"]);
            }
            other => panic!("expected vocabulary error, got {other:?}"),
        }
    }

    #[test]
    fn vocabulary_rejects_degenerate_lists() {
        assert!(Vocabulary::new(["only"]).is_err());
        assert!(Vocabulary::new(["a", "b", "a"]).is_err());
        let v: Vocabulary = serde_json::from_str(r#"["rater1","rater2","rater3"]"#).unwrap();
        assert_eq!(v.len(), 3);
        assert!(serde_json::from_str::<Vocabulary>(r#"["x"]"#).is_err());
    }

    #[test]
    fn one_hot_validation() {
        assert!(ConditioningVector::from_values(&[0.5, 0.5]).is_err());
        assert!(ConditioningVector::from_values(&[1.0, 1.0]).is_err());
        assert!(ConditioningVector::from_values(&[1.0]).is_err());
        assert_eq!(ConditioningVector::from_values(&[0.0, 0.0, 1.0]).unwrap().index(), 2);
    }

    fn hand_set() -> (FilmGenerator, ModelParams<f64>) {
        let gen = FilmGenerator::new(0, 2, 2, 2);
        let mut p = ModelParams::new();
        let t = |s: &[usize], v: &[f64]| Tensor::from_f64(s, v).unwrap();
        p.insert(gen.name("h.weight"), t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        p.insert(gen.name("h.bias"), t(&[2], &[0.0, 0.0]));
        p.insert(gen.name("gamma.weight"), t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        p.insert(gen.name("gamma.bias"), t(&[2], &[0.0, 0.0]));
        p.insert(gen.name("beta.weight"), t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        p.insert(gen.name("beta.bias"), t(&[2], &[0.5, -0.5]));
        (gen, p)
    }

    #[test]
    fn generate_matches_matrix_product() {
        let (gen, p) = hand_set();
        let z = ConditioningVector::from_values(&[1.0, 0.0]).unwrap();
        let out = gen.generate(&p, &z).unwrap();
        assert_eq!(out.gamma, vec![1.0, 3.0]);
        assert_eq!(out.beta, vec![0.5, -0.5]);
        let z = ConditioningVector::from_values(&[0.0, 1.0]).unwrap();
        assert_eq!(gen.generate(&p, &z).unwrap().gamma, vec![2.0, 4.0]);
    }

    #[test]
    fn generate_rejects_width_mismatch() {
        let (gen, p) = hand_set();
        let z = ConditioningVector::from_values(&[0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(gen.generate(&p, &z), Err(Error::Tensor(TensorError::Dimension { .. }))));
    }

    #[test]
    fn modulate_examples() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = film_modulate(&x, &FilmParams { gamma: vec![2.0], beta: vec![-1.0] }).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 5.0, 7.0]);
        let id = film_modulate(&x, &FilmParams { gamma: vec![1.0], beta: vec![0.0] }).unwrap();
        assert_eq!(id, x);
        let x2 = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let flat = film_modulate(&x2, &FilmParams { gamma: vec![0.0, 0.0], beta: vec![7.0, -2.0] }).unwrap();
        assert_eq!(flat.data(), &[7.0, 7.0, -2.0, -2.0]);
        assert!(film_modulate(&x2, &FilmParams { gamma: vec![1.0], beta: vec![0.0] }).is_err());
    }
}
