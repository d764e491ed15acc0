use answerme_core::mixture::BatchComposer;

/// Every batch of `batches` holds exactly B/N examples of each of N
/// datasets, with B = 16 N, for each N in `ns`.
pub fn equal_share(ns: &[usize], batches: u64) -> String {
    let sizes = [37, 5, 100, 16, 3, 64, 11, 29];
    for &n in ns {
        let b = 16 * n;
        let mut c = BatchComposer::new(&sizes[..n], b, n as u64).unwrap();
        for step in 1..=batches {
            let batch = c.next_batch();
            assert_eq!(batch.len(), b);
            for d in 0..n {
                assert_eq!(batch.iter().filter(|(k, _)| *k == d).count(), b / n, "N={n} step {step}");
                assert!(batch.iter().all(|&(k, i)| i < sizes[k]));
            }
            assert!(c.counts().iter().all(|&x| x == step * (b / n) as u64));
        }
    }
    format!("N in {ns:?}, {batches} batches each")
}
