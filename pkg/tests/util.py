"""Shared test helpers."""

from natwatch.flowdata import DeviceModelId, FlowDataset, FlowRecord, LabeledFlow

WEBCAM = DeviceModelId("webcam", "D_Link", "DCS_933L")


def make_flow(**overrides) -> FlowRecord:
    base = dict(
        ingress_interface=1,
        src_ip="192.168.1.5",
        dst_ip="8.8.8.8",
        ip_protocol=17,
        src_port=40000,
        dst_port=53,
        tos=0,
        in_bytes=812,
        out_bytes=120,
        src_tos=0,
        dst_tos=0,
        l7_proto_name="DNS",
        flow_start_ms=1_000,
        flow_end_ms=4_000,
    )
    base.update(overrides)
    return FlowRecord(**base)


def make_labeled(label=WEBCAM, mac="aa:bb:cc:dd:ee:01", **overrides) -> LabeledFlow:
    return LabeledFlow(flow=make_flow(**overrides), label=label, source_mac=mac)


def dataset(*labeled) -> FlowDataset:
    return FlowDataset(list(labeled))
