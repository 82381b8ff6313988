use crate::error::{Error, Result};
use crate::qot::{FeatureSchema, NormStats};

/// Schema and normalization statistics a dataset was encoded with.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub schema: FeatureSchema,
    pub stats: NormStats,
}

/// Encoded feature matrix (row-major) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    width: usize,
    labels: Vec<u8>,
    domains: Option<Vec<u32>>,
    encoding: Option<Encoding>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, width: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 {
            return Err(Error::Schema("feature width must be positive".into()));
        }
        if features.len() != labels.len() * width {
            return Err(Error::Schema(format!(
                "{} labels with width {width} need {} feature values, got {}",
                labels.len(),
                labels.len() * width,
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("feature value {i} is not finite")));
        }
        Ok(Self {
            features,
            width,
            labels,
            domains: None,
            encoding: None,
        })
    }

    pub fn with_domains(mut self, domains: Vec<u32>) -> Result<Self> {
        if domains.len() != self.labels.len() {
            return Err(Error::Schema("domain tags do not match row count".into()));
        }
        self.domains = Some(domains);
        Ok(self)
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = Some(encoding);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn domains(&self) -> Option<&[u32]> {
        self.domains.as_deref()
    }

    pub fn encoding(&self) -> Option<&Encoding> {
        self.encoding.as_ref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    /// Copies the listed rows, in the listed order, into the two buffers.
    pub fn gather_into(&self, indices: &[usize], features: &mut Vec<f64>, labels: &mut Vec<u8>) {
        features.clear();
        labels.clear();
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        self.gather_into(indices, &mut features, &mut labels);
        Dataset {
            features,
            width: self.width,
            labels,
            domains: self
                .domains
                .as_ref()
                .map(|d| indices.iter().map(|&i| d[i]).collect()),
            encoding: self.encoding.clone(),
        }
    }

    /// Stacks datasets of equal width. Domain tags survive only if every part has them.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("nothing to concatenate".into()))?;
        if let Some(bad) = parts.iter().find(|p| p.width != first.width) {
            return Err(Error::Schema(format!(
                "cannot stack width {} onto width {}",
                bad.width, first.width
            )));
        }
        let features = parts.iter().flat_map(|p| p.features.iter().copied()).collect();
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        let domains = parts
            .iter()
            .map(|p| p.domains.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|ds| ds.into_iter().flatten().copied().collect());
        Ok(Dataset {
            features,
            width: first.width,
            labels,
            domains,
            encoding: first.encoding.clone(),
        })
    }

    /// Fraction of rows labelled 1.
    pub fn positive_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_shapes() {
        assert!(Dataset::new(vec![1.0, 2.0, 3.0], 2, vec![0, 1]).is_err());
        assert!(Dataset::new(vec![f64::NAN, 2.0], 2, vec![0]).is_err());
        assert!(Dataset::new(vec![], 0, vec![]).is_err());
    }

    #[test]
    fn subset_and_concat() {
        let ds = Dataset::new(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, vec![0, 1, 1])
            .unwrap()
            .with_domains(vec![0, 1, 2])
            .unwrap();
        let sub = ds.subset(&[2, 0]);
        assert_eq!(sub.features(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(sub.labels(), &[1, 0]);
        assert_eq!(sub.domains(), Some(&[2, 0][..]));
        let both = Dataset::concat(&[sub, ds.clone()]).unwrap();
        assert_eq!(both.len(), 5);
        assert_eq!(both.row(2), &[0.0, 1.0]);
        let narrow = Dataset::new(vec![1.0], 1, vec![0]).unwrap();
        assert!(Dataset::concat(&[ds, narrow]).is_err());
    }
}
