//! One contact session over a TCP stream.

use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::watch;
use tokio::time::{sleep_until, Instant};

use dtn_learn::proto::{Applied, Event, FrameReader};

use crate::daemon::Shared;

const TICK: Duration = Duration::from_millis(250);
const SLICE: usize = 16 * 1024;

/// Sender-side pacing to a fixed bit rate.
struct Pacer {
    rate_bps: Option<u64>,
    next: Instant,
}

impl Pacer {
    async fn take(&mut self, bytes: usize) {
        let Some(rate) = self.rate_bps else { return };
        let now = Instant::now();
        if self.next > now {
            sleep_until(self.next).await;
        }
        let cost = Duration::from_secs_f64(bytes as f64 * 8.0 / rate as f64);
        self.next = self.next.max(now) + cost;
    }
}

async fn send(wr: &mut OwnedWriteHalf, pacer: &mut Pacer, applied: &Applied) -> std::io::Result<()> {
    for f in &applied.frames {
        let bytes = f.encode();
        for part in bytes.chunks(SLICE) {
            pacer.take(part.len()).await;
            wr.write_all(part).await?;
        }
    }
    Ok(())
}

async fn cancelled(cancel: &mut Option<watch::Receiver<bool>>) {
    match cancel {
        Some(rx) => {
            while *rx.borrow_and_update() {
                if rx.changed().await.is_err() {
                    std::future::pending::<()>().await;
                }
            }
        }
        None => std::future::pending().await,
    }
}

/// Runs a session until it finishes or the link drops. `cancel` going false
/// drops the link (a mule driving away).
pub async fn drive_session(
    shared: &Shared,
    stream: TcpStream,
    initiator: bool,
    mut cancel: Option<watch::Receiver<bool>>,
) {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let mut pacer = Pacer { rate_bps: shared.cfg.link_rate_bps, next: Instant::now() };
    let mut session = shared.with_node(|n, now| n.begin_session(now));
    let mut reader = FrameReader::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut ticks = tokio::time::interval(TICK);
    ticks.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);

    let first = shared.step(&mut session, Event::LinkUp { initiator });
    let mut closing = first.close;
    let mut link_ok = send(&mut wr, &mut pacer, &first).await.is_ok();

    'outer: while link_ok && !closing && !session.is_finished() {
        tokio::select! {
            r = rd.read(&mut buf) => {
                let n = match r {
                    Ok(0) | Err(_) => break 'outer,
                    Ok(n) => n,
                };
                reader.push(&buf[..n]);
                loop {
                    match reader.next_frame() {
                        Ok(Some(frame)) => {
                            let a = shared.step(&mut session, Event::FrameReceived(frame));
                            closing |= a.close;
                            if send(&mut wr, &mut pacer, &a).await.is_err() {
                                link_ok = false;
                            }
                            if !link_ok || closing || session.is_finished() {
                                break;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            tracing::warn!(error = %e, "undecodable bytes on link");
                            break 'outer;
                        }
                    }
                }
            }
            _ = ticks.tick() => {
                let a = shared.step(&mut session, Event::Tick);
                closing |= a.close;
                link_ok = send(&mut wr, &mut pacer, &a).await.is_ok();
            }
            _ = cancelled(&mut cancel) => break 'outer,
        }
    }
    let _ = wr.shutdown().await;
    if !session.is_finished() {
        shared.step(&mut session, Event::LinkDown);
    }
    shared.with_node(|n, now| n.session_closed(&session, now));
    tracing::info!(
        outcome = ?session.abort_reason(),
        completed = session.completed().len(),
        sent = session.bytes_sent(),
        received = session.bytes_received(),
        "session closed"
    );
}
