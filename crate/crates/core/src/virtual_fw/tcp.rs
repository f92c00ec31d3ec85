use serde::{Deserialize, Serialize};

use super::FwError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TcpState {
    Closed,
    Listen,
    SynSent,
    SynRcvd,
    Established,
    FinWait1,
    FinWait2,
    CloseWait,
    LastAck,
    TimeWait,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcpEvent {
    PassiveOpen,
    ActiveOpen,
    Syn,
    SynAck,
    Ack,
    Fin,
    Timeout,
    Close,
}

impl TcpState {
    pub const ALL: [TcpState; 10] = [
        TcpState::Closed,
        TcpState::Listen,
        TcpState::SynSent,
        TcpState::SynRcvd,
        TcpState::Established,
        TcpState::FinWait1,
        TcpState::FinWait2,
        TcpState::CloseWait,
        TcpState::LastAck,
        TcpState::TimeWait,
    ];
}

impl TcpEvent {
    pub const ALL: [TcpEvent; 8] = [
        TcpEvent::PassiveOpen,
        TcpEvent::ActiveOpen,
        TcpEvent::Syn,
        TcpEvent::SynAck,
        TcpEvent::Ack,
        TcpEvent::Fin,
        TcpEvent::Timeout,
        TcpEvent::Close,
    ];
}

/// The permitted edges. There is no CLOSING state, so a FIN arriving in
/// FIN_WAIT_1 (with its ACK) moves straight to TIME_WAIT.
pub fn tcp_step(state: TcpState, event: TcpEvent) -> Result<TcpState, FwError> {
    use TcpEvent as E;
    use TcpState as S;
    let next = match (state, event) {
        (S::Closed, E::PassiveOpen) => S::Listen,
        (S::Closed, E::ActiveOpen) => S::SynSent,
        (S::Listen, E::Syn) => S::SynRcvd,
        (S::Listen, E::Close) => S::Closed,
        (S::SynSent, E::SynAck) => S::Established,
        (S::SynSent, E::Syn) => S::SynRcvd,
        (S::SynSent, E::Close | E::Timeout) => S::Closed,
        (S::SynRcvd, E::Ack) => S::Established,
        (S::SynRcvd, E::Close) => S::FinWait1,
        (S::SynRcvd, E::Timeout) => S::Closed,
        (S::Established, E::Ack) => S::Established,
        (S::Established, E::Close) => S::FinWait1,
        (S::Established, E::Fin) => S::CloseWait,
        (S::FinWait1, E::Ack) => S::FinWait2,
        (S::FinWait1, E::Fin) => S::TimeWait,
        (S::FinWait2, E::Fin) => S::TimeWait,
        (S::CloseWait, E::Close) => S::LastAck,
        (S::LastAck, E::Ack) => S::Closed,
        (S::TimeWait, E::Timeout) => S::Closed,
        _ => return Err(FwError::IllegalTransition { state, event }),
    };
    Ok(next)
}
