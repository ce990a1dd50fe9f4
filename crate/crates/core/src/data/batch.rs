use rand::seq::index;
use rand::Rng;

use super::{BatchLayout, LabeledSample, UnlabeledSample};
use crate::{Error, Result};

/// A mixed-domain mini-batch. The field a sample sits in is its role.
#[derive(Debug, Clone, Default)]
pub struct SampleBatch {
    pub source_labeled: Vec<LabeledSample>,
    pub target_labeled: Vec<LabeledSample>,
    pub target_unlabeled: Vec<UnlabeledSample>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.source_labeled.len() + self.target_labeled.len() + self.target_unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `quota` pool indices: distinct when the pool is large enough,
/// otherwise with replacement.
fn draw<R: Rng + ?Sized>(rng: &mut R, pool: usize, quota: usize) -> Vec<usize> {
    if quota <= pool {
        index::sample(rng, pool, quota).into_vec()
    } else {
        (0..quota).map(|_| rng.random_range(0..pool)).collect()
    }
}

fn pick<T: Clone, R: Rng + ?Sized>(
    rng: &mut R,
    pool: &[T],
    quota: usize,
    name: &str,
) -> Result<Vec<T>> {
    if quota == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "batch layout asks for {quota} samples from the empty {name} pool"
        )));
    }
    Ok(draw(rng, pool.len(), quota)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Composes one batch with exactly the layout's quotas. Pools with a zero
/// quota are never read.
pub fn compose_batch<R: Rng + ?Sized>(
    source_labeled: &[LabeledSample],
    target_labeled: &[LabeledSample],
    target_unlabeled: &[UnlabeledSample],
    layout: BatchLayout,
    rng: &mut R,
) -> Result<SampleBatch> {
    Ok(SampleBatch {
        source_labeled: pick(rng, source_labeled, layout.n_source_labeled, "labeled source")?,
        target_labeled: pick(rng, target_labeled, layout.n_target_labeled, "labeled target")?,
        target_unlabeled: pick(
            rng,
            target_unlabeled,
            layout.n_target_unlabeled,
            "unlabeled target",
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, Mask};
    use crate::DomainId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labeled(n: usize, domain: DomainId, tag: &str) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| {
                LabeledSample::new(Image::zeros((2, 2)), Mask::zeros((2, 2)), domain, format!("{tag}{i}"), 2)
                    .unwrap()
            })
            .collect()
    }

    fn unlabeled(n: usize) -> Vec<UnlabeledSample> {
        (0..n).map(|i| UnlabeledSample::new(Image::zeros((2, 2)), format!("u{i}"))).collect()
    }

    #[test]
    fn singleton_pools_fill_a_unit_layout() {
        let (s, t, u) = (labeled(1, DomainId::Source, "s"), labeled(1, DomainId::Target, "t"), unlabeled(1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = compose_batch(&s, &t, &u, BatchLayout::new(1, 1, 1), &mut rng).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.source_labeled[0].id, "s0");
        assert_eq!(b.target_labeled[0].id, "t0");
        assert_eq!(b.target_unlabeled[0].id, "u0");
    }

    #[test]
    fn paper_layouts() {
        let (s, t, u) = (labeled(40, DomainId::Source, "s"), labeled(3, DomainId::Target, "t"), unlabeled(30));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = compose_batch(&s, &t, &u, BatchLayout::VESSEL, &mut rng).unwrap();
        assert_eq!(b.len(), 16);
        let b = compose_batch(&s, &t, &u, BatchLayout::CIRCULAR, &mut rng).unwrap();
        assert_eq!(b.len(), 24);
        assert!(b.source_labeled.iter().all(|x| x.domain == DomainId::Source));
        assert!(b.target_labeled.iter().all(|x| x.domain == DomainId::Target));
    }

    #[test]
    fn empty_required_pool_is_a_config_error() {
        let s = labeled(2, DomainId::Source, "s");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            compose_batch(&s, &[], &[], BatchLayout::new(1, 1, 0), &mut rng),
            Err(Error::Config(_))
        ));
        // zero quota on an empty pool is fine
        assert!(compose_batch(&s, &[], &[], BatchLayout::new(2, 0, 0), &mut rng).is_ok());
    }

    #[test]
    fn counts_match_layout_over_many_draws() {
        let (s, t, u) = (labeled(5, DomainId::Source, "s"), labeled(2, DomainId::Target, "t"), unlabeled(7));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let l = BatchLayout::new(rng.random_range(0..9), rng.random_range(0..5), rng.random_range(0..9));
            let b = compose_batch(&s, &t, &u, l, &mut rng).unwrap();
            assert_eq!(b.source_labeled.len(), l.n_source_labeled);
            assert_eq!(b.target_labeled.len(), l.n_target_labeled);
            assert_eq!(b.target_unlabeled.len(), l.n_target_unlabeled);
        }
    }
}
