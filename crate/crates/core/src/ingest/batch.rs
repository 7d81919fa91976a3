use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{IngestError, LabelCoding, MfishSample};
use crate::nn::{Float, Tensor4};

/// One training batch. `targets` has one channel per chromosome class in
/// `LabelCoding::chromosome_codes` order; background and overlap pixels get
/// an all-zero target vector and mask 0.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub ids: Vec<String>,
    pub inputs: Tensor4<F>,
    pub targets: Tensor4<F>,
    pub mask: Tensor4<F>,
}

/// 1×6×H×W network input for a single sample.
pub fn sample_input<F: Float>(sample: &MfishSample) -> Tensor4<F> {
    let (c, h, w) = sample.channels.dim();
    let values = sample
        .channels
        .mapv(|v| F::of(v as f64))
        .into_shape_with_order((1, c, h, w))
        .expect("contiguous channels");
    Tensor4::wrap(values)
}

/// Yields batches in a seeded permutation of the samples; the last batch may
/// be short.
pub struct BatchIterator<'a, F> {
    samples: &'a [MfishSample],
    lookup: Vec<Option<u8>>,
    num_classes: usize,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    _scalar: std::marker::PhantomData<F>,
}

impl<'a, F: Float> BatchIterator<'a, F> {
    pub fn new<R: Rng + ?Sized>(
        samples: &'a [MfishSample],
        coding: &LabelCoding,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Self, IngestError> {
        if batch_size == 0 {
            return Err(IngestError::ZeroBatchSize);
        }
        if let Some(first) = samples.first() {
            if let Some(other) = samples.iter().find(|s| s.dims() != first.dims()) {
                return Err(IngestError::HeterogeneousSizes {
                    first: first.dims(),
                    other: other.dims(),
                });
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        Ok(Self {
            samples,
            lookup: coding.class_lookup(),
            num_classes: coding.num_classes(),
            batch_size,
            order,
            pos: 0,
            _scalar: std::marker::PhantomData,
        })
    }

    /// Sizes of the batches this iterator will produce.
    pub fn batch_sizes(&self) -> Vec<usize> {
        self.order.chunks(self.batch_size).map(<[usize]>::len).collect()
    }

    fn build(&self, members: &[usize]) -> Batch<F> {
        let (h, w) = self.samples[members[0]].dims();
        let n = members.len();
        let mut inputs = Array4::zeros((n, self.samples[members[0]].channels.dim().0, h, w));
        let mut targets = Array4::zeros((n, self.num_classes, h, w));
        let mut mask = Array4::zeros((n, 1, h, w));
        let mut ids = Vec::with_capacity(n);
        for (b, &idx) in members.iter().enumerate() {
            let sample = &self.samples[idx];
            ids.push(sample.id.clone());
            inputs
                .slice_mut(s![b, .., .., ..])
                .assign(&sample.channels.mapv(|v| F::of(v as f64)));
            for ((y, x), &code) in sample.labels.indexed_iter() {
                if let Some(Some(class)) = self.lookup.get(code as usize) {
                    targets[[b, *class as usize, y, x]] = F::one();
                    mask[[b, 0, y, x]] = F::one();
                }
            }
        }
        Batch {
            ids,
            inputs: Tensor4::wrap(inputs),
            targets: Tensor4::wrap(targets),
            mask: Tensor4::wrap(mask),
        }
    }
}

impl<F: Float> Iterator for BatchIterator<'_, F> {
    type Item = Batch<F>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let members = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.build(&members))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ProbeSet;
    use ndarray::{Array2, Array3, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(id: &str, h: usize, w: usize) -> MfishSample {
        let labels = Array2::from_shape_fn((h, w), |(y, x)| match (y + x) % 4 {
            0 => 0,
            1 => 5,
            2 => 255,
            _ => 23,
        });
        MfishSample::new(id, Array3::from_elem((6, h, w), 0.5), labels, ProbeSet::Vysis, &LabelCoding::default())
            .unwrap()
    }

    #[test]
    fn sixty_five_samples_in_batches_of_sixteen() {
        let samples: Vec<_> = (0..65).map(|i| tiny(&format!("V{i:03}"), 2, 2)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let it = BatchIterator::<f32>::new(&samples, &LabelCoding::default(), 16, &mut rng).unwrap();
        assert_eq!(it.batch_sizes(), [16, 16, 16, 16, 1]);
        let sizes: Vec<usize> = it.map(|b| b.ids.len()).collect();
        assert_eq!(sizes, [16, 16, 16, 16, 1]);
    }

    #[test]
    fn one_hot_and_mask_encoding() {
        let coding = LabelCoding::default();
        let samples = vec![tiny("V1", 4, 4)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = BatchIterator::<f64>::new(&samples, &coding, 4, &mut rng).unwrap().next().unwrap();
        let t = batch.targets.values();
        let m = batch.mask.values();
        for ((y, x), &code) in samples[0].labels.indexed_iter() {
            let sum: f64 = t.slice(s![0, .., y, x]).sum();
            assert_eq!(sum, m[[0, 0, y, x]]);
            match code {
                0 | 255 => assert_eq!(m[[0, 0, y, x]], 0.0),
                5 => assert_eq!(t[[0, coding.class_index(5).unwrap(), y, x]], 1.0),
                23 => assert_eq!(t[[0, 22, y, x]], 1.0),
                _ => unreachable!(),
            }
        }
        assert_eq!(batch.inputs.dims(), (1, 6, 4, 4));
        assert!(batch.inputs.values().index_axis(Axis(1), 5).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn heterogeneous_sizes_are_rejected() {
        let samples = vec![tiny("V1", 4, 4), tiny("V2", 4, 5)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            BatchIterator::<f32>::new(&samples, &LabelCoding::default(), 2, &mut rng),
            Err(IngestError::HeterogeneousSizes { .. })
        ));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let samples: Vec<_> = (0..10).map(|i| tiny(&format!("V{i}"), 2, 2)).collect();
        let order = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            BatchIterator::<f32>::new(&samples, &LabelCoding::default(), 3, &mut rng)
                .unwrap()
                .flat_map(|b| b.ids)
                .collect::<Vec<_>>()
        };
        assert_eq!(order(1), order(1));
        let mut sorted = order(2);
        sorted.sort();
        let mut all: Vec<_> = samples.iter().map(|s| s.id.clone()).collect();
        all.sort();
        assert_eq!(sorted, all);
    }
}
