use std::net::TcpListener;
use std::time::Duration;

use fedeini::ahe::keygen;
use fedeini::bench::{auc, SyntheticCredit};
use fedeini::engine::plaintext_predict;
use fedeini::model::{load_model_file, save_model_file, VerticalPartition};
use fedeini::protocol::{
    guest_share, host_share, run_fed_eini, run_guest, serve_host, tcp_endpoint, Federation, Mode, ProtocolConfig,
    TraceRecorder,
};
use fedeini::trainer::{fit_gbdt, TrainConfig};

fn trained(rows: usize, trees: usize) -> (fedeini::bench::Dataset, fedeini::model::TreeEnsemble) {
    let data = SyntheticCredit::new(11, 10).generate(rows);
    let config = TrainConfig {
        trees,
        max_depth: 3,
        ..Default::default()
    };
    let model = fit_gbdt(&data, &config).unwrap().ensemble;
    (data, model)
}

#[test]
fn trained_model_survives_a_file_round_trip_and_federated_inference() {
    let (data, model) = trained(400, 8);
    let partition = VerticalPartition::guest_first(10, 5, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model_file(&path, &model, &partition).unwrap();
    let (loaded, loaded_partition) = load_model_file(&path).unwrap();
    assert_eq!(loaded_partition, partition);

    let fed = Federation::with_default_scale(&loaded, &partition, &data, keygen(256).unwrap()).unwrap();
    let out = run_fed_eini(&fed, fed.sample_ids(), &ProtocolConfig::default()).unwrap();
    for (i, p) in out.predictions.iter().enumerate() {
        let want = plaintext_predict(&model, data.row(i)).unwrap();
        assert!((p - want).abs() < 1e-6);
    }
    let score = auc(data.labels(), &out.predictions).unwrap();
    assert!(score > 0.6, "trained model should rank better than chance: {score}");
}

#[test]
fn parties_over_tcp_match_the_plaintext_oracle() {
    let (data, model) = trained(60, 4);
    for (parties, mode) in [(2, Mode::Batched), (3, Mode::Chain), (3, Mode::Baseline)] {
        let partition = VerticalPartition::guest_first(10, 4, parties).unwrap();
        let listeners: Vec<_> = (0..parties).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
        let addrs: Vec<_> = listeners.iter().map(|l| l.local_addr().unwrap()).collect();
        let recorder = TraceRecorder::new(false);
        let mut endpoints: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(p, l)| tcp_endpoint(p, l, addrs.clone(), Duration::ZERO, &recorder))
            .collect();
        let host_eps = endpoints.split_off(1);

        let guest = guest_share(&model, &partition, &data, keygen(256).unwrap(), 32).unwrap();
        let hosts: Vec<_> = (1..parties)
            .map(|p| host_share(&model, &partition, &data, p).unwrap())
            .collect();
        let out = std::thread::scope(|s| {
            for (h, ep) in hosts.iter().zip(host_eps) {
                s.spawn(move || serve_host(h, ep).unwrap());
            }
            run_guest(&guest, endpoints.pop().unwrap(), mode, data.sample_ids(), &ProtocolConfig::default()).unwrap()
        });
        for (i, p) in out.predictions.iter().enumerate() {
            let want = plaintext_predict(&model, data.row(i)).unwrap();
            assert!((p - want).abs() < 1e-6, "{mode:?} row {i}");
        }
    }
}

#[test]
fn host_share_rejects_the_guest_slot() {
    let (data, model) = trained(20, 1);
    let partition = VerticalPartition::guest_first(10, 5, 2).unwrap();
    assert!(host_share(&model, &partition, &data, 0).is_err());
    assert!(host_share(&model, &partition, &data, 2).is_err());
}
