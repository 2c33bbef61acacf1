use std::collections::BTreeMap;

use super::codec::{decode_as, decode_frame, encode_frame, DecodeError, Kind, Reader, Writer};
use crate::anchorbank::AnchorBank;
use crate::fedcore::MaskRow;
use crate::synthdata::ModalityId;
use crate::toymodel::ParamSet;

/// Server to one client at the start of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct Broadcast {
    pub round: u64,
    pub recipient: u32,
    /// Server encoders for the recipient's modalities.
    pub encoders: BTreeMap<ModalityId, ParamSet>,
    /// Server's shared decoder parameters.
    pub decoder: ParamSet,
    pub anchors: AnchorBank,
    /// Recipient's mask bits (counters stay on the server).
    pub mask: MaskRow,
}

/// Client to server after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub round: u64,
    pub site_id: u32,
    pub encoders: BTreeMap<ModalityId, ParamSet>,
    pub decoder: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RoundMessage {
    Broadcast(Broadcast),
    Report(Report),
}

impl Broadcast {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u64(self.round);
        w.u32(self.recipient);
        w.encoders(&self.encoders);
        w.param_set(&self.decoder);
        w.anchors(&self.anchors);
        w.mask_row(&self.mask);
        encode_frame(Kind::Broadcast, &w.buf)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            round: r.u64()?,
            recipient: r.u32()?,
            encoders: r.encoders()?,
            decoder: r.param_set()?,
            anchors: r.anchors()?,
            mask: r.mask_row()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        decode_as(bytes, Kind::Broadcast, Self::read)
    }
}

impl Report {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u64(self.round);
        w.u32(self.site_id);
        w.encoders(&self.encoders);
        w.param_set(&self.decoder);
        encode_frame(Kind::Report, &w.buf)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            round: r.u64()?,
            site_id: r.u32()?,
            encoders: r.encoders()?,
            decoder: r.param_set()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        decode_as(bytes, Kind::Report, Self::read)
    }
}

impl RoundMessage {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            RoundMessage::Broadcast(b) => b.encode(),
            RoundMessage::Report(r) => r.encode(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let (kind, payload) = decode_frame(bytes)?;
        let mut r = Reader::new(payload);
        let msg = match kind {
            Kind::Broadcast => RoundMessage::Broadcast(Broadcast::read(&mut r)?),
            Kind::Report => RoundMessage::Report(Report::read(&mut r)?),
            other => {
                return Err(DecodeError::Malformed(format!(
                    "{other:?} frame is not a round message"
                )))
            }
        };
        r.finish()?;
        Ok(msg)
    }
}
