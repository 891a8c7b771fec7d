use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ClientDataset, SegSample};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const DEFAULT_VAL_RATIO: f64 = 0.1;

/// Leave-one-client-out split. `train` and `val` keep one dataset per
/// remaining client so federated training can use them client by client.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<ClientDataset>,
    pub val: Vec<ClientDataset>,
    pub test: ClientDataset,
}

impl Split {
    pub fn train_samples(&self) -> impl Iterator<Item = &SegSample> {
        self.train.iter().flat_map(|c| &c.samples)
    }

    pub fn val_samples(&self) -> impl Iterator<Item = &SegSample> {
        self.val.iter().flat_map(|c| &c.samples)
    }
}

/// Holds out `test_client` entirely and splits every other client into
/// train/val after a shuffle seeded per client. The validation count is
/// `max(1, floor(n * val_ratio))`.
pub fn partition_leave_one_out(
    federation: &[ClientDataset],
    test_client: u32,
    val_ratio: f64,
    seed: u64,
) -> Result<Split> {
    if federation.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 2 clients, got {}",
            federation.len()
        )));
    }
    if !(0.0..1.0).contains(&val_ratio) {
        return Err(Error::Config(format!("val_ratio {val_ratio} outside [0, 1)")));
    }
    let test = federation
        .iter()
        .find(|c| c.client_id == test_client)
        .ok_or_else(|| Error::Config(format!("unknown test client {test_client}")))?
        .clone();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for client in federation.iter().filter(|c| c.client_id != test_client) {
        let n = client.n_local();
        if n < 2 {
            return Err(Error::Data(format!(
                "client {} has {n} sample(s); a train/val split needs 2",
                client.client_id
            )));
        }
        let n_val = ((n as f64 * val_ratio).floor() as usize).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, client.client_id as u64)));
        let pick = |idx: &[usize]| idx.iter().map(|&i| client.samples[i].clone()).collect::<Vec<_>>();
        val.push(ClientDataset::new(client.client_id, client.name.clone(), pick(&order[..n_val]))?);
        train.push(ClientDataset::new(client.client_id, client.name.clone(), pick(&order[n_val..]))?);
    }
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn client(id: u32, n: usize) -> ClientDataset {
        let samples = (0..n)
            .map(|i| SegSample {
                id: format!("c{id}/{i}"),
                image: Tensor::zeros(vec![4, 4, 3]),
                mask: Tensor::zeros(vec![1, 1, 1]),
                volume_id: None,
                client_id: id,
            })
            .collect();
        ClientDataset::new(id, format!("c{id}"), samples).unwrap()
    }

    #[test]
    fn two_clients() {
        let fed = [client(0, 20), client(1, 12)];
        let s = partition_leave_one_out(&fed, 1, DEFAULT_VAL_RATIO, 0).unwrap();
        assert_eq!(s.test.client_id, 1);
        assert_eq!(s.train.len(), 1);
        assert_eq!(s.train[0].client_id, 0);
        assert_eq!((s.train[0].n_local(), s.val[0].n_local()), (18, 2));
    }

    #[test]
    fn exact_ratio() {
        let fed = [client(0, 100), client(1, 10)];
        let s = partition_leave_one_out(&fed, 1, 0.1, 3).unwrap();
        assert_eq!((s.train[0].n_local(), s.val[0].n_local()), (90, 10));
        // the 1-minimum kicks in for small clients
        let fed = [client(0, 10), client(1, 5)];
        let s = partition_leave_one_out(&fed, 0, 0.1, 3).unwrap();
        assert_eq!(s.val[0].n_local(), 1);
    }

    #[test]
    fn errors() {
        let fed = [client(0, 10), client(1, 10)];
        assert!(matches!(partition_leave_one_out(&fed, 7, 0.1, 0), Err(Error::Config(_))));
        assert!(matches!(partition_leave_one_out(&fed[..1], 0, 0.1, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn set_partition(sizes in prop::collection::vec(2usize..40, 2..6), pick in 0usize..6, seed: u64) {
            let fed: Vec<_> = sizes.iter().enumerate().map(|(i, &n)| client(i as u32, n)).collect();
            let test_id = (pick % fed.len()) as u32;
            let s = partition_leave_one_out(&fed, test_id, DEFAULT_VAL_RATIO, seed).unwrap();
            let ids: Vec<&str> = s
                .train_samples()
                .chain(s.val_samples())
                .chain(&s.test.samples)
                .map(|x| x.id.as_str())
                .collect();
            let unique: HashSet<&str> = ids.iter().copied().collect();
            prop_assert_eq!(unique.len(), ids.len());
            let all: HashSet<&str> = fed.iter().flat_map(|c| &c.samples).map(|x| x.id.as_str()).collect();
            prop_assert_eq!(unique, all);
            prop_assert!(s.test.samples.iter().all(|x| x.client_id == test_id));
        }
    }
}
