use std::collections::HashSet;
use std::time::Duration;

use cryptocam::camera::{
    synthetic_frames, BaseTier, Camera, CameraConfig, Chunking, Clock, SourceSpec, StoreTarget,
    Tier, VirtualClock,
};
use cryptocam::client::{fetch_and_decrypt, ChainCheck, KeyRecord, Listener, Wallet};
use cryptocam::crypto::{verify_links, ChainLink, LinkStatus};
use cryptocam::protocol::{CameraDescriptor, Location, Mode};
use cryptocam::store::{FsStore, ObjectKey, ObjectStore};
use cryptocam::transport::udp::{UdpCameraLink, UdpScanner};
use cryptocam::transport::{Address, Broadcaster, Medium, MediumPort, Peer, PeerKind, Scanner};

const T0: u64 = 1_800_000_000_000;

fn config(dir: &std::path::Path, interval_s: u32, rate: u64, limit: Option<u64>) -> CameraConfig {
    CameraConfig {
        descriptor: CameraDescriptor {
            name: "Porch".into(),
            mode: Mode::Auto,
            location: Location::Description("front door".into()),
            url_template: "https://footage.example/{id}.mp4".into(),
        },
        camera_id: [0xB0, 0x0B, 0, 0, 0, 0, 0, 1],
        segment_interval_s: interval_s,
        advert_interval_ms: 250,
        mode: Mode::Auto,
        delay_s: 0,
        chunking: None,
        base_tier: None,
        store_target: StoreTarget::Directory(dir.to_path_buf()),
        source: SourceSpec::Synthetic { seed: 77, rate_bytes_per_s: rate, limit_bytes: limit },
        withheld_budget_bytes: 1 << 20,
    }
}

fn loopback(cfg: &CameraConfig) -> (MediumPort, MediumPort) {
    let medium = Medium::loopback();
    let me = Address([0xAB; 6]);
    medium.register(Peer { address: cfg.address(), position: None, kind: PeerKind::Camera }).unwrap();
    medium.register(Peer { address: me, position: None, kind: PeerKind::Listener }).unwrap();
    (medium.port(cfg.address()), medium.port(me))
}

/// Steps camera and listener together on a virtual clock until the source runs dry.
fn drive<B: Broadcaster, S: Scanner, O: ObjectStore>(
    camera: &mut Camera<B, O>,
    listener: &mut Listener<S>,
    pause: Option<Duration>,
) {
    let clock = VirtualClock::new(T0);
    for _ in 0..10_000 {
        let now = clock.now_ms();
        camera.step(now).unwrap();
        if let Some(p) = pause {
            std::thread::sleep(p);
        }
        listener.poll(now);
        if camera.is_finished() {
            return;
        }
        clock.sleep_until(camera.next_deadline().unwrap_or(now + 100).max(now + 1));
    }
    panic!("camera never finished");
}

fn sorted(w: &Wallet, tier: Tier) -> Vec<KeyRecord> {
    let mut v: Vec<_> = w.records().iter().filter(|r| r.tier == tier).cloned().collect();
    v.sort_by_key(|r| r.seq);
    v
}

#[test]
fn keys_travel_over_udp_and_open_the_stored_footage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1, 400, Some(1400));
    let link = UdpCameraLink::bind("127.0.0.1:0".parse().unwrap(), cfg.address()).unwrap();
    let scanner = UdpScanner::connect(link.local_addr().unwrap(), Address([0x5C; 6])).unwrap();
    let fs = FsStore::open(dir.path()).unwrap();
    let source = cfg.source.open().unwrap();
    let mut camera = Camera::new(cfg, source, link, fs.clone()).unwrap();
    let mut listener = Listener::new(scanner, Wallet::new());
    drive(&mut camera, &mut listener, Some(Duration::from_millis(15)));

    let records = sorted(listener.wallet(), Tier::Full);
    assert_eq!(records.len(), 4);
    let mut plain = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let d = fetch_and_decrypt(r, &[], &fs, records.get(i + 1)).unwrap();
        if i + 1 < records.len() {
            assert_eq!(d.chain, ChainCheck::Confirmed);
        }
        plain.extend(d.footage.plaintext());
    }
    assert_eq!(plain, synthetic_frames(77, 400).take_bytes(1400));
}

#[test]
fn broadcast_ids_match_stored_objects_and_keys_never_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1, 50, Some(50 * 40));
    let (cam, me) = loopback(&cfg);
    let fs = FsStore::open(dir.path()).unwrap();
    let source = cfg.source.open().unwrap();
    let mut camera = Camera::new(cfg, source, cam, fs.clone()).unwrap();
    let mut listener = Listener::new(me, Wallet::new());
    drive(&mut camera, &mut listener, None);

    let records = sorted(listener.wallet(), Tier::Full);
    assert_eq!(records.len(), 40);
    let broadcast: HashSet<ObjectKey> =
        records.iter().map(|r| ObjectKey::from_url(&r.url().unwrap()).unwrap()).collect();
    let stored: HashSet<ObjectKey> = fs.list().unwrap().into_iter().collect();
    assert_eq!(broadcast, stored);

    let keys: HashSet<[u8; 32]> = records.iter().map(|r| r.key).collect();
    assert_eq!(keys.len(), 40);
    assert_eq!(camera.key_fingerprints().len(), 40);
    // sequence numbers count up from zero
    assert!(records.iter().enumerate().all(|(i, r)| r.seq as usize == i));
}

#[test]
fn missing_and_replaced_objects_are_reported_at_their_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1, 64, Some(64 * 5));
    let (cam, me) = loopback(&cfg);
    let fs = FsStore::open(dir.path()).unwrap();
    let source = cfg.source.open().unwrap();
    let mut camera = Camera::new(cfg, source, cam, fs.clone()).unwrap();
    let mut listener = Listener::new(me, Wallet::new());
    drive(&mut camera, &mut listener, None);

    let records = sorted(listener.wallet(), Tier::Full);
    let keys: Vec<ObjectKey> = records.iter().map(|r| ObjectKey::from_url(&r.url().unwrap()).unwrap()).collect();
    let mut files: Vec<Option<Vec<u8>>> = keys.iter().map(|k| Some(fs.get(k).unwrap())).collect();
    let check = |files: &[Option<Vec<u8>>]| {
        let links: Vec<ChainLink<'_>> = files
            .iter()
            .zip(&records)
            .map(|(f, r)| ChainLink { stored_file: f.as_deref(), prev_hash_prefix: r.prev_hash_prefix })
            .collect();
        verify_links(&links)
    };
    assert!(check(&files).all_ok());

    files[2] = None;
    let r = check(&files);
    assert_eq!(r.statuses[3], LinkStatus::Unavailable);
    assert!(!r.all_ok());

    // swapping in another segment's valid container is still caught
    files[2] = files[1].clone();
    let r = check(&files);
    assert_eq!(r.first_mismatch, Some(2));
    assert_eq!(r.mismatched_files(), vec![2]);
}

#[test]
fn tokens_open_only_the_chunks_they_cover() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 2, 500, Some(1000));
    cfg.chunking = Some(Chunking { chunk_count: 4, token_advert_interval_ms: 250 });
    let (cam, me) = loopback(&cfg);
    let fs = FsStore::open(dir.path()).unwrap();
    let source = cfg.source.open().unwrap();
    let mut camera = Camera::new(cfg, source, cam, fs.clone()).unwrap();
    let mut listener = Listener::new(me, Wallet::new());
    drive(&mut camera, &mut listener, None);

    let wallet = listener.wallet();
    let record = sorted(wallet, Tier::Full).remove(0);
    let tokens = wallet.tokens_for(&record.video_id);
    assert_eq!(tokens.len(), 4);
    let whole = fetch_and_decrypt(&record, &tokens, &fs, None).unwrap();
    assert_eq!(whole.footage.plaintext(), synthetic_frames(77, 500).take_bytes(1000));
    assert!(whole.footage.locked_chunks().is_empty());

    let some: Vec<_> = tokens.iter().filter(|t| t.chunk_index >= 2).cloned().collect();
    let part = fetch_and_decrypt(&record, &some, &fs, None).unwrap();
    assert_eq!(part.footage.locked_chunks(), vec![0, 1]);
    assert_eq!(part.footage.plaintext(), whole.footage.plaintext()[500..].to_vec());
}

#[test]
fn base_tier_is_a_separate_chain_of_decimated_footage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1, 300, Some(900));
    cfg.base_tier = Some(BaseTier { rate_divisor: 3 });
    let (cam, me) = loopback(&cfg);
    let fs = FsStore::open(dir.path()).unwrap();
    let source = cfg.source.open().unwrap();
    let mut camera = Camera::new(cfg, source, cam, fs.clone()).unwrap();
    let mut listener = Listener::new(me, Wallet::new());
    drive(&mut camera, &mut listener, None);

    let full = sorted(listener.wallet(), Tier::Full);
    let base = sorted(listener.wallet(), Tier::Base);
    assert_eq!((full.len(), base.len()), (3, 3));
    let source = synthetic_frames(77, 300).take_bytes(900);
    for (i, r) in base.iter().enumerate() {
        assert!(full.iter().all(|f| f.key != r.key && f.video_id != r.video_id));
        let d = fetch_and_decrypt(r, &[], &fs, base.get(i + 1)).unwrap();
        let segment = &source[i * 300..(i + 1) * 300];
        let expect: Vec<u8> = segment.iter().step_by(3).copied().collect();
        assert_eq!(d.footage.plaintext(), expect);
        if i + 1 < base.len() {
            assert_eq!(d.chain, ChainCheck::Confirmed);
        }
    }
}
