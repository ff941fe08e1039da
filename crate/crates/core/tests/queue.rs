use std::collections::VecDeque;
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use sbrk_core::proto::{self, ChannelParams, EthMsg, Message, SimTime, WireMessage};
use sbrk_core::shmq::{self, heap_queue, Consumer, Producer, WouldBlock};

const N: u64 = 100_000;

fn push(p: &mut Producer, v: u64) {
    let mut slot = p.alloc();
    slot.body()[..8].copy_from_slice(&v.to_le_bytes());
    slot.enqueue((v % 100) as u8 + 1);
}

fn pop(c: &mut Consumer) -> Option<(u64, u8)> {
    let slot = c.poll()?;
    let v = u64::from_le_bytes(slot.body()[..8].try_into().unwrap());
    Some((v, slot.type_code()))
}

#[test]
fn spsc_across_threads_keeps_order() {
    for len in [2, 3, 64, 256] {
        let (mut p, mut c) = heap_queue(64, len);
        let producer = thread::spawn(move || (0..N).for_each(|v| push(&mut p, v)));
        let mut next = 0;
        while next < N {
            if let Some((v, ty)) = pop(&mut c) {
                assert_eq!((v, ty), (next, (next % 100) as u8 + 1), "queue_len {len}");
                next += 1;
            } else {
                thread::yield_now();
            }
        }
        producer.join().unwrap();
        assert!(pop(&mut c).is_none());
    }
}

#[test]
fn two_slot_queue_blocks_producer_until_release() {
    let (mut p, mut c) = heap_queue(32, 2);
    push(&mut p, 1);
    push(&mut p, 2);
    assert!(p.try_alloc().is_none());
    assert!(matches!(p.alloc_timeout(Duration::from_millis(20)), Err(WouldBlock)));
    let started = Instant::now();
    let t = thread::spawn(move || {
        push(&mut p, 3);
        p
    });
    thread::sleep(Duration::from_millis(50));
    assert!(!t.is_finished(), "producer wrote into a slot the consumer still owns");
    let s = c.poll().unwrap();
    assert_eq!(s.body()[0], 1);
    // Holding the reader keeps the slot; only release frees it.
    thread::sleep(Duration::from_millis(20));
    assert!(!t.is_finished());
    s.release();
    let p = t.join().unwrap();
    assert!(started.elapsed() >= Duration::from_millis(70));
    assert_eq!(pop(&mut c).unwrap().0, 2);
    assert_eq!(pop(&mut c).unwrap().0, 3);
    assert!(!p.consumer_owns(p.tail()));
}

#[test]
fn shared_memory_channel_carries_1e5_messages_each_way() {
    let dir = tempfile::tempdir().unwrap();
    let sock = dir.path().join("q.sock");
    let params = ChannelParams { queue_len_slots: 8, slot_size_bytes: 128, ..Default::default() };
    let listener = shmq::Listener::bind(&sock, params).unwrap();
    let shm = listener.default_shm_path();
    let acceptor = thread::spawn(move || listener.accept(shm).unwrap());
    let b = shmq::connect(&sock).unwrap();
    let a = acceptor.join().unwrap();
    assert_eq!(a.params, b.params);

    let pump = |mut ep: shmq::ChannelEndpoint| {
        thread::spawn(move || {
            let mut got = 0u64;
            let mut sent = 0u64;
            while got < N || sent < N {
                if sent < N {
                    if let Some(mut slot) = ep.tx.try_alloc() {
                        let f = [sent.to_le_bytes().as_slice(), &[0u8; 8]].concat();
                        let msg = WireMessage::new(SimTime(sent), Message::Eth(EthMsg::Packet(f)));
                        let ty = proto::encode_body(&msg, slot.body()).unwrap();
                        slot.enqueue(ty.code());
                        sent += 1;
                    }
                }
                while let Some(m) = ep.try_recv().unwrap() {
                    assert_eq!(m.timestamp, SimTime(got));
                    let Message::Eth(EthMsg::Packet(f)) = m.body else { panic!() };
                    assert_eq!(u64::from_le_bytes(f[..8].try_into().unwrap()), got);
                    got += 1;
                }
                thread::yield_now();
            }
            ep
        })
    };
    let (ta, tb) = (pump(a), pump(b));
    let (a, b) = (ta.join().unwrap(), tb.join().unwrap());
    assert!(a.peer_alive() && b.peer_alive());
    drop(b);
    let t = Instant::now();
    while a.peer_alive() {
        assert!(t.elapsed() < Duration::from_secs(5));
        thread::sleep(Duration::from_millis(1));
    }
}

#[derive(Clone, Debug)]
enum Op {
    Push,
    Pop,
}

proptest! {
    #[test]
    fn queue_matches_a_bounded_fifo(len in 2usize..9, ops in proptest::collection::vec(prop_oneof![Just(Op::Push), Just(Op::Pop)], 1..400)) {
        let (mut p, mut c) = heap_queue(24, len);
        let mut model = VecDeque::new();
        let mut next = 0u64;
        for op in ops {
            match op {
                Op::Push => match p.try_alloc() {
                    Some(mut slot) => {
                        prop_assert!(model.len() < len);
                        slot.body()[..8].copy_from_slice(&next.to_le_bytes());
                        slot.enqueue(3);
                        model.push_back(next);
                        next += 1;
                    }
                    None => prop_assert_eq!(model.len(), len),
                },
                Op::Pop => prop_assert_eq!(pop(&mut c).map(|(v, _)| v), model.pop_front()),
            }
            prop_assert_eq!(c.ready(), !model.is_empty());
        }
    }
}
