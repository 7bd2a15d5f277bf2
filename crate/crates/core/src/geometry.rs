//! Closed-form latent edits: shifting along a boundary normal and projecting
//! onto the boundary hyperplane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// A point in the generator latent space. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> LatentVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::input("latent vector must have dimension >= 1"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("latent entry {i} is not finite")));
        }
        Ok(LatentVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }

    pub fn dot(&self, other: &[T]) -> T {
        scalar::dot(&self.values, other)
    }
}

impl<T> AsRef<[T]> for LatentVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.values
    }
}

/// Training metadata carried alongside a boundary.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundaryMeta {
    pub n_train: usize,
    pub validation_accuracy: f64,
    pub average_distance: f64,
}

/// Separating hyperplane for one attribute. The normal is always unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBoundary<T> {
    attribute: String,
    normal: Vec<T>,
    bias: T,
    pub meta: BoundaryMeta,
}

impl<T: Scalar> AttributeBoundary<T> {
    /// Builds a boundary, rescaling `(normal, bias)` so the normal is unit.
    pub fn new(attribute: impl Into<String>, normal: Vec<T>, bias: T) -> Result<Self> {
        if normal.is_empty() {
            return Err(Error::input("boundary normal must have dimension >= 1"));
        }
        if normal.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return Err(Error::input("boundary normal and bias must be finite"));
        }
        let n = scalar::norm(&normal);
        if n == T::zero() {
            return Err(Error::input("boundary normal is the zero vector"));
        }
        Ok(AttributeBoundary {
            attribute: attribute.into(),
            normal: normal.into_iter().map(|v| v / n).collect(),
            bias: bias / n,
            meta: BoundaryMeta::default(),
        })
    }

    pub fn with_meta(mut self, meta: BoundaryMeta) -> Result<Self> {
        if !(0.0..=1.0).contains(&meta.validation_accuracy) {
            return Err(Error::Invariant(format!(
                "validation accuracy {} outside [0, 1]",
                meta.validation_accuracy
            )));
        }
        if !(meta.average_distance >= 0.0) {
            return Err(Error::Invariant(format!(
                "average distance {} is negative",
                meta.average_distance
            )));
        }
        self.meta = meta;
        Ok(self)
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn normal(&self) -> &[T] {
        &self.normal
    }

    pub fn bias(&self) -> T {
        self.bias
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    fn check_dim(&self, w: &LatentVector<T>) -> Result<()> {
        if w.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: w.dim(),
            });
        }
        Ok(())
    }

    fn check_unit(&self) -> Result<()> {
        let tol = T::of(1e-9).max(T::of(16.0) * T::epsilon());
        let n = scalar::norm(&self.normal);
        if (n - T::one()).abs() > tol {
            return Err(Error::Invariant(format!(
                "boundary `{}` normal has norm {n}, expected 1",
                self.attribute
            )));
        }
        Ok(())
    }

    pub fn to_doc(&self) -> BoundaryDoc {
        BoundaryDoc {
            attribute: self.attribute.clone(),
            normal: self.normal.iter().map(|v| v.as_f64()).collect(),
            bias: self.bias.as_f64(),
            n_train: self.meta.n_train,
            validation_accuracy: self.meta.validation_accuracy,
            average_distance: self.meta.average_distance,
        }
    }

    /// Loads a stored boundary. Stored normals must already be unit length.
    pub fn from_doc(doc: &BoundaryDoc) -> Result<Self> {
        let b = AttributeBoundary {
            attribute: doc.attribute.clone(),
            normal: doc.normal.iter().map(|&v| T::of(v)).collect(),
            bias: T::of(doc.bias),
            meta: BoundaryMeta::default(),
        };
        if b.normal.is_empty() || b.normal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "boundary `{}` has an empty or non-finite normal",
                doc.attribute
            )));
        }
        b.check_unit()?;
        b.with_meta(BoundaryMeta {
            n_train: doc.n_train,
            validation_accuracy: doc.validation_accuracy,
            average_distance: doc.average_distance,
        })
    }
}

/// On-disk boundary document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDoc {
    pub attribute: String,
    pub normal: Vec<f64>,
    pub bias: f64,
    pub n_train: usize,
    pub validation_accuracy: f64,
    pub average_distance: f64,
}

/// `w + alpha * n`.
pub fn transform<T: Scalar>(
    w: &LatentVector<T>,
    b: &AttributeBoundary<T>,
    alpha: T,
) -> Result<LatentVector<T>> {
    b.check_dim(w)?;
    if !alpha.is_finite() {
        return Err(Error::input("edit magnitude alpha must be finite"));
    }
    let values = w
        .values
        .iter()
        .zip(&b.normal)
        .map(|(&x, &n)| x + alpha * n)
        .collect();
    LatentVector::new(values)
}

/// `w - (w . n) n`: projection onto the hyperplane through the origin.
/// The bias is deliberately ignored; see [`signed_distance`] for it.
pub fn neutralize<T: Scalar>(w: &LatentVector<T>, b: &AttributeBoundary<T>) -> Result<LatentVector<T>> {
    b.check_dim(w)?;
    b.check_unit()?;
    let along = w.dot(&b.normal);
    let values = w
        .values
        .iter()
        .zip(&b.normal)
        .map(|(&x, &n)| x - along * n)
        .collect();
    LatentVector::new(values)
}

/// `w . n + bias`.
pub fn signed_distance<T: Scalar>(w: &LatentVector<T>, b: &AttributeBoundary<T>) -> Result<T> {
    b.check_dim(w)?;
    Ok(w.dot(&b.normal) + b.bias)
}

#[derive(Debug, Clone, Copy)]
pub enum EditStep<'a, T> {
    Transform {
        boundary: &'a AttributeBoundary<T>,
        alpha: T,
    },
    Neutralize {
        boundary: &'a AttributeBoundary<T>,
    },
}

impl<T: Scalar> EditStep<'_, T> {
    pub fn apply(&self, w: &LatentVector<T>) -> Result<LatentVector<T>> {
        match *self {
            EditStep::Transform { boundary, alpha } => transform(w, boundary, alpha),
            EditStep::Neutralize { boundary } => neutralize(w, boundary),
        }
    }
}

/// Applies `steps` left to right. An empty list returns `w` unchanged.
pub fn compose_edits<T: Scalar>(w: &LatentVector<T>, steps: &[EditStep<'_, T>]) -> Result<LatentVector<T>> {
    steps.iter().enumerate().try_fold(w.clone(), |acc, (index, step)| {
        step.apply(&acc).map_err(|e| Error::Step {
            index,
            source: Box::new(e),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LatentVector<f64> {
        LatentVector::new(v.to_vec()).unwrap()
    }

    fn bd(n: &[f64], bias: f64) -> AttributeBoundary<f64> {
        AttributeBoundary::new("a", n.to_vec(), bias).unwrap()
    }

    #[test]
    fn transform_examples() {
        assert_eq!(transform(&lv(&[1., 0.]), &bd(&[0., 1.], 0.), 2.0).unwrap(), lv(&[1., 2.]));
        assert_eq!(transform(&lv(&[3., 4.]), &bd(&[0., 1.], 0.), 0.0).unwrap(), lv(&[3., 4.]));
        assert_eq!(
            transform(&lv(&[0., 0., 0.]), &bd(&[1., 0., 0.], 0.), -1.5).unwrap(),
            lv(&[-1.5, 0., 0.])
        );
    }

    #[test]
    fn transform_errors() {
        let b = bd(&[0., 1.], 0.);
        assert!(matches!(
            transform(&lv(&[1., 2., 3.]), &b, 1.0),
            Err(Error::Dimension { expected: 2, found: 3 })
        ));
        assert!(matches!(transform(&lv(&[1., 2.]), &b, f64::NAN), Err(Error::Input(_))));
        assert!(matches!(transform(&lv(&[1., 2.]), &b, f64::INFINITY), Err(Error::Input(_))));
    }

    #[test]
    fn neutralize_examples() {
        let n = bd(&[0., 1.], 0.);
        assert_eq!(neutralize(&lv(&[3., 4.]), &n).unwrap(), lv(&[3., 0.]));
        assert_eq!(neutralize(&lv(&[3., 0.]), &n).unwrap(), lv(&[3., 0.]));
        assert_eq!(neutralize(&lv(&[0., 5.]), &n).unwrap(), lv(&[0., 0.]));
    }

    #[test]
    fn neutralize_rejects_non_unit_normal() {
        let doc = BoundaryDoc {
            attribute: "yaw".into(),
            normal: vec![0.0, 2.0],
            bias: 0.0,
            n_train: 0,
            validation_accuracy: 1.0,
            average_distance: 0.0,
        };
        assert!(matches!(AttributeBoundary::<f64>::from_doc(&doc), Err(Error::Invariant(_))));
    }

    #[test]
    fn constructor_normalizes_and_rejects_zero() {
        let b = bd(&[0., 2.], 4.);
        assert_eq!(b.normal(), &[0., 1.]);
        assert_eq!(b.bias(), 2.0);
        assert!(AttributeBoundary::<f64>::new("z", vec![0., 0.], 0.).is_err());
    }

    #[test]
    fn signed_distance_examples() {
        assert_eq!(signed_distance(&lv(&[3., 4.]), &bd(&[0., 1.], 0.)).unwrap(), 4.0);
        assert_eq!(signed_distance(&lv(&[3., 0.]), &bd(&[0., 1.], 0.)).unwrap(), 0.0);
        assert_eq!(signed_distance(&lv(&[1., 1.]), &bd(&[0., 1.], -1.)).unwrap(), 0.0);
        assert!(signed_distance(&lv(&[1.]), &bd(&[0., 1.], 0.)).is_err());
    }

    #[test]
    fn compose_examples() {
        let ny = bd(&[0., 1.], 0.);
        let nx = bd(&[1., 0.], 0.);
        let w = lv(&[2., 3.]);
        let r = compose_edits(
            &w,
            &[EditStep::Neutralize { boundary: &ny }, EditStep::Neutralize { boundary: &nx }],
        )
        .unwrap();
        assert_eq!(r, lv(&[0., 0.]));

        let r = compose_edits(
            &w,
            &[
                EditStep::Neutralize { boundary: &ny },
                EditStep::Transform { boundary: &ny, alpha: 1.0 },
            ],
        )
        .unwrap();
        assert_eq!(r, lv(&[2., 1.]));

        let r = compose_edits(
            &lv(&[1., 0.]),
            &[
                EditStep::Transform { boundary: &nx, alpha: 1.0 },
                EditStep::Transform { boundary: &nx, alpha: -1.0 },
            ],
        )
        .unwrap();
        assert_eq!(r, lv(&[1., 0.]));
    }

    #[test]
    fn compose_empty_is_identity() {
        let w = lv(&[2., 3.]);
        assert_eq!(compose_edits::<f64>(&w, &[]).unwrap(), w);
    }

    #[test]
    fn compose_reports_step_index() {
        let ok = bd(&[1., 0.], 0.);
        let wrong = bd(&[1., 0., 0.], 0.);
        let err = compose_edits(
            &lv(&[1., 1.]),
            &[
                EditStep::Transform { boundary: &ok, alpha: 1.0 },
                EditStep::Neutralize { boundary: &wrong },
            ],
        )
        .unwrap_err();
        match err {
            Error::Step { index, source } => {
                assert_eq!(index, 1);
                assert!(matches!(*source, Error::Dimension { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn latent_rejects_non_finite() {
        assert!(LatentVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LatentVector::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn works_in_f32() {
        let w = LatentVector::new(vec![3.0f32, 4.0]).unwrap();
        let b = AttributeBoundary::new("a", vec![0.0f32, 1.0], 0.0).unwrap();
        assert_eq!(neutralize(&w, &b).unwrap().as_slice(), &[3.0, 0.0]);
    }
}
