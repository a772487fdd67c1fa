//! Identity-balanced batch sampling: every batch holds exactly P distinct
//! identities with K images each, and every epoch covers each identity at
//! least once. Batches for an epoch are a pure function of (seed, epoch).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::PersonImage;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Index batches for one epoch. Each batch lists `p * k` indices into
/// `train`, grouped identity by identity.
pub fn epoch_batches(
    train: &[PersonImage],
    p: usize,
    k: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, person) in train.iter().enumerate() {
        groups.entry(person.person_id).or_default().push(i);
    }
    if groups.len() < p {
        return Err(Error::Config(format!(
            "need at least {p} identities for P={p} sampling, train set has {}",
            groups.len()
        )));
    }
    let mut rng = stream(seed, Purpose::Sampler, &[epoch]);
    let ids: Vec<u32> = groups.keys().copied().collect();
    let mut order = ids.clone();
    order.shuffle(&mut rng);

    // pad to a multiple of P with ids absent from the trailing chunk
    let deficit = (p - order.len() % p) % p;
    if deficit > 0 {
        let tail_start = order.len() - (order.len() % p);
        let tail: std::collections::BTreeSet<u32> = order[tail_start..].iter().copied().collect();
        let mut pool: Vec<u32> = ids.iter().copied().filter(|id| !tail.contains(id)).collect();
        pool.shuffle(&mut rng);
        order.extend(pool.into_iter().take(deficit));
    }

    let mut batches = Vec::with_capacity(order.len() / p);
    for chunk in order.chunks(p) {
        let mut batch = Vec::with_capacity(p * k);
        for &id in chunk {
            let group = &groups[&id];
            if group.len() >= k {
                let mut local = group.clone();
                local.shuffle(&mut rng);
                batch.extend(local.into_iter().take(k));
            } else {
                // resample with replacement when an identity has fewer images
                for _ in 0..k {
                    batch.push(group[rng.gen_range(0..group.len())]);
                }
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageBuf;

    fn person(id: u32) -> PersonImage {
        PersonImage {
            image: ImageBuf::filled(4, 2, [0.0; 3]),
            person_id: id,
            camera_id: 0,
            mask: None,
            name: format!("{id}"),
        }
    }

    fn train_set(ids: usize, per_id: usize) -> Vec<PersonImage> {
        (0..ids as u32)
            .flat_map(|id| std::iter::repeat(id).take(per_id))
            .map(person)
            .collect()
    }

    #[test]
    fn paper_batch_geometry() {
        let train = train_set(16, 6);
        let batches = epoch_batches(&train, 8, 4, 1, 0).unwrap();
        for batch in &batches {
            assert_eq!(batch.len(), 32);
            let distinct: std::collections::BTreeSet<u32> =
                batch.iter().map(|&i| train[i].person_id).collect();
            assert_eq!(distinct.len(), 8);
        }
    }

    #[test]
    fn two_identity_set_always_contains_both() {
        let train = train_set(2, 3);
        let batches = epoch_batches(&train, 2, 2, 9, 4).unwrap();
        for batch in &batches {
            let distinct: std::collections::BTreeSet<u32> =
                batch.iter().map(|&i| train[i].person_id).collect();
            assert_eq!(distinct.len(), 2);
        }
    }

    #[test]
    fn epoch_covers_every_identity() {
        let train = train_set(11, 5); // 11 ids, P=4: padding kicks in
        for epoch in 0..5 {
            let batches = epoch_batches(&train, 4, 2, 3, epoch).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            for batch in &batches {
                for &i in batch {
                    seen.insert(train[i].person_id);
                }
                // every batch still has exactly P distinct identities
                let distinct: std::collections::BTreeSet<u32> =
                    batch.iter().map(|&i| train[i].person_id).collect();
                assert_eq!(distinct.len(), 4);
            }
            assert_eq!(seen.len(), 11, "epoch {epoch} missed identities");
        }
    }

    #[test]
    fn identities_with_too_few_images_resample() {
        let train = train_set(4, 1);
        let batches = epoch_batches(&train, 4, 3, 5, 0).unwrap();
        assert_eq!(batches[0].len(), 12);
    }

    #[test]
    fn too_few_identities_is_a_configuration_error() {
        let train = train_set(3, 4);
        assert!(matches!(
            epoch_batches(&train, 8, 4, 0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batches_are_deterministic_per_seed_and_epoch() {
        let train = train_set(10, 4);
        let a = epoch_batches(&train, 4, 2, 7, 3).unwrap();
        let b = epoch_batches(&train, 4, 2, 7, 3).unwrap();
        assert_eq!(a, b);
        let c = epoch_batches(&train, 4, 2, 7, 4).unwrap();
        assert_ne!(a, c);
    }
}
