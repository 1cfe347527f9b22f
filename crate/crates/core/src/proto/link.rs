//! In-process link that carries frames between two sessions under a byte budget.

use std::collections::{BTreeMap, VecDeque};

use crate::bundle::BundleId;
use crate::proto::frame::Frame;
use crate::proto::session::{Action, ChunkSource, Event, Session};
use crate::Millis;

/// A node as seen by a link driver: it reads outgoing chunks and applies the
/// non-send actions a session emits.
pub trait Endpoint {
    fn chunk_source(&self) -> &dyn ChunkSource;

    /// Applies actions in order. Returns the frames to transmit; stops early
    /// (and aborts the session) if an action fails.
    fn apply(&mut self, session: &mut Session, now: Millis, actions: Vec<Action>) -> Applied;
}

#[derive(Debug, Default)]
pub struct Applied {
    pub frames: Vec<Frame>,
    pub close: bool,
}

/// Splits actions into frames and a close flag, handing the rest to `f`.
/// Used by endpoint implementations; `f` returning `Err` aborts the session.
pub fn apply_with(
    session: &mut Session,
    actions: Vec<Action>,
    mut f: impl FnMut(&Session, Action) -> Result<(), String>,
) -> Applied {
    let mut out = Applied::default();
    for action in actions {
        match action {
            Action::SendFrame(frame) => out.frames.push(frame),
            Action::CloseLink => out.close = true,
            other => {
                if let Err(e) = f(session, other) {
                    tracing::warn!(error = %e, "aborting session after failed action");
                    session.abort_local(e);
                    out.close = true;
                    break;
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContactOutcome {
    /// Bytes debited from the budget (every frame, both directions).
    pub bytes_used: u64,
    /// Bytes of frames sent before the first CHUNK, beacon included.
    pub setup_bytes: u64,
    pub frames_delivered: u64,
    /// The budget ran out with frames still pending.
    pub budget_exhausted: bool,
    /// Delivered CHUNK payload bytes per (sent by initiator, bundle).
    pub chunk_bytes: BTreeMap<(bool, BundleId), u64>,
}

impl ContactOutcome {
    pub fn payload_bytes(&self) -> u64 {
        self.chunk_bytes.values().sum()
    }
}

/// Runs one contact between `a` (initiator) and `b`, both in `Idle`.
///
/// Frames travel in one FIFO, so per-direction order is preserved. Every
/// frame is debited from `budget`; the first frame that does not fit is lost
/// and both sides see `LinkDown`, as do sessions still open when traffic stops.
#[allow(clippy::too_many_arguments)]
pub fn run_budgeted_contact<A: Endpoint, B: Endpoint>(
    a: &mut A,
    sa: &mut Session,
    b: &mut B,
    sb: &mut Session,
    beacon: Option<Frame>,
    budget: u64,
    now: Millis,
) -> ContactOutcome {
    let mut out = ContactOutcome::default();
    let mut remaining = budget;
    let mut seen_chunk = false;

    if let Some(beacon) = beacon {
        let cost = beacon.encoded_len() as u64;
        if cost > remaining {
            out.budget_exhausted = true;
            return out;
        }
        remaining -= cost;
        out.bytes_used += cost;
        out.setup_bytes += cost;
    }

    // (to_b, frame)
    let mut queue: VecDeque<(bool, Frame)> = VecDeque::new();
    let mut closed = false;

    let acts = sa.step(now, Event::LinkUp { initiator: true }, a.chunk_source());
    let applied = a.apply(sa, now, acts);
    closed |= applied.close;
    queue.extend(applied.frames.into_iter().map(|f| (true, f)));
    let acts = sb.step(now, Event::LinkUp { initiator: false }, b.chunk_source());
    let applied = b.apply(sb, now, acts);
    closed |= applied.close;
    queue.extend(applied.frames.into_iter().map(|f| (false, f)));

    while !closed {
        let Some((to_b, frame)) = queue.pop_front() else { break };
        let cost = frame.encoded_len() as u64;
        if cost > remaining {
            out.budget_exhausted = true;
            break;
        }
        remaining -= cost;
        out.bytes_used += cost;
        out.frames_delivered += 1;
        if let Frame::Chunk { id, data, .. } = &frame {
            seen_chunk = true;
            *out.chunk_bytes.entry((to_b, *id)).or_default() += data.len() as u64;
        }
        if !seen_chunk {
            out.setup_bytes += cost;
        }
        let applied = if to_b {
            let acts = sb.step(now, Event::FrameReceived(frame), b.chunk_source());
            b.apply(sb, now, acts)
        } else {
            let acts = sa.step(now, Event::FrameReceived(frame), a.chunk_source());
            a.apply(sa, now, acts)
        };
        closed |= applied.close;
        queue.extend(applied.frames.into_iter().map(|f| (!to_b, f)));
    }

    for (ep_is_a, session) in [(true, &mut *sa), (false, &mut *sb)] {
        if !session.is_finished() {
            let acts = if ep_is_a {
                session.step(now, Event::LinkDown, a.chunk_source())
            } else {
                session.step(now, Event::LinkDown, b.chunk_source())
            };
            if ep_is_a {
                a.apply(session, now, acts);
            } else {
                b.apply(session, now, acts);
            }
        }
    }
    out
}
