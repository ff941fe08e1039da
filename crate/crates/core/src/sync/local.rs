use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::Transport;
use crate::proto::{self, ChannelParams, WireMessage};
use crate::shmq::{heap_queue, ChannelError, Consumer, Producer, WouldBlock};

/// One end of an in-process channel: the same slot queues as a
/// shared-memory channel, over heap memory, for threads in one process.
#[derive(Debug)]
pub struct LocalEndpoint {
    tx: Producer,
    rx: Consumer,
    mine: Arc<AtomicBool>,
    theirs: Arc<AtomicBool>,
}

/// Two connected endpoints with the geometry from `params`.
pub fn local_pair(params: &ChannelParams) -> (LocalEndpoint, LocalEndpoint) {
    let slot = params.slot_size_bytes as usize;
    let len = params.queue_len_slots as usize;
    let (atx, brx) = heap_queue(slot, len);
    let (btx, arx) = heap_queue(slot, len);
    let a_alive = Arc::new(AtomicBool::new(true));
    let b_alive = Arc::new(AtomicBool::new(true));
    (
        LocalEndpoint { tx: atx, rx: arx, mine: a_alive.clone(), theirs: b_alive.clone() },
        LocalEndpoint { tx: btx, rx: brx, mine: b_alive, theirs: a_alive },
    )
}

impl Drop for LocalEndpoint {
    fn drop(&mut self) {
        self.mine.store(false, Ordering::Release);
    }
}

impl Transport for LocalEndpoint {
    fn send(&mut self, msg: &WireMessage) -> Result<(), ChannelError> {
        loop {
            match self.tx.alloc_timeout(Duration::from_millis(50)) {
                Ok(mut slot) => {
                    let ty = proto::encode_body(msg, slot.body())?;
                    slot.enqueue(ty.code());
                    return Ok(());
                }
                Err(WouldBlock) => {
                    if !self.theirs.load(Ordering::Acquire) {
                        return Err(ChannelError::PeerClosed);
                    }
                }
            }
        }
    }

    fn try_recv(&mut self) -> Result<Option<WireMessage>, ChannelError> {
        match self.rx.poll() {
            Some(slot) => {
                let msg = proto::decode_parts(slot.type_code(), slot.body());
                slot.release();
                Ok(Some(msg?))
            }
            None => Ok(None),
        }
    }

    fn peer_alive(&self) -> bool {
        self.theirs.load(Ordering::Acquire)
    }
}
