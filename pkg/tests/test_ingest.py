import io
from datetime import date, datetime

import pytest
from hypothesis import given, strategies as st

from flowseq import ingest
from flowseq.ingest import FlowRecord, FlowSchema, InternalNetworks

HEADER = (" Source IP, Destination IP, Source Port, Destination Port, Protocol, Timestamp,"
          "Total Length of Fwd Packets, Total Length of Bwd Packets, Label\n")


def csv_bytes(*rows):
    return io.BytesIO((HEADER + "".join(r + "\n" for r in rows)).encode())


def rec(row_id, src="192.168.10.5", dst="8.8.8.8", ts=datetime(2017, 7, 3, 9, 0), label="BENIGN"):
    return FlowRecord(row_id, ts, src, dst, 50000, 443, 6, 100, label)


def test_parse_sums_byte_columns():
    res = ingest.parse_flow_csv(csv_bytes("192.168.10.5,8.8.8.8,54321,443,6,7/3/2017 9:05,512,512,BENIGN"))
    assert res.rejected == []
    (r,) = res.records
    assert r.byte_count == 1024
    assert (r.src_ip, r.dst_ip, r.src_port, r.dst_port, r.protocol) == ("192.168.10.5", "8.8.8.8", 54321, 443, 6)
    assert r.timestamp == datetime(2017, 7, 3, 9, 5)


def test_missing_protocol_is_incomplete():
    res = ingest.parse_flow_csv(csv_bytes("192.168.10.5,8.8.8.8,54321,443,,7/3/2017 9:05,512,512,BENIGN"))
    assert res.records == []
    assert [(r.line_number, r.reason) for r in res.rejected] == [(2, "incomplete")]


def test_empty_csv_with_header():
    res = ingest.parse_flow_csv(csv_bytes())
    assert res.records == [] and res.rejected == []


def test_missing_configured_column_is_fatal():
    src = io.StringIO("Source IP,Destination IP\n1.2.3.4,5.6.7.8\n")
    with pytest.raises(ingest.SchemaError, match="Protocol"):
        ingest.parse_flow_csv(src)


@pytest.mark.parametrize("row, reason", [
    ("192.168.10.5,not-an-ip,1,2,6,7/3/2017 9:05,1,1,BENIGN", "bad_ip"),
    ("192.168.10.5,8.8.8.8,70000,2,6,7/3/2017 9:05,1,1,BENIGN", "bad_port"),
    ("192.168.10.5,8.8.8.8,1,2,tcp,7/3/2017 9:05,1,1,BENIGN", "bad_protocol"),
    ("192.168.10.5,8.8.8.8,1,2,6,7/3/2017 9:05,-1,1,BENIGN", "bad_bytes"),
    ("192.168.10.5,8.8.8.8,1,2,6,yesterday,1,1,BENIGN", "bad_timestamp"),
    ("192.168.10.5,8.8.8.8,1,2", "incomplete"),
])
def test_reject_reasons(row, reason):
    res = ingest.parse_flow_csv(csv_bytes(row))
    assert [r.reason for r in res.rejected] == [reason]


def test_timestamp_with_seconds_and_custom_schema(tmp_path):
    cfg = tmp_path / "schema.ini"
    cfg.write_text("[schema]\nsrc_ip = sa\ndst_ip = da\nsrc_port = sp\ndst_port = dp\n"
                   "protocol = pr\ntimestamp = ts\nlabel = lab\nbyte_columns = ibyt | obyt\n"
                   "timestamp_formats = %Y-%m-%d %H:%M:%S\n")
    schema = FlowSchema.from_config(cfg)
    src = io.StringIO("sa,da,sp,dp,pr,ts,ibyt,obyt,lab\n10.0.0.1,10.0.0.2,1,2,17,2020-01-02 03:04:05,3,4,BENIGN\n")
    (r,) = ingest.parse_flow_csv(src, schema).records
    assert r.byte_count == 7 and r.timestamp == datetime(2020, 1, 2, 3, 4, 5)


def test_row_ids_are_unique_and_offset():
    res = ingest.parse_flow_csv(csv_bytes(
        "192.168.10.5,8.8.8.8,1,2,6,7/3/2017 9:05,1,1,BENIGN",
        "bad",
        "192.168.10.6,8.8.8.8,1,2,6,7/3/2017 9:06,1,1,BENIGN",
    ), start_row_id=100)
    assert [r.row_id for r in res.records] == [100, 102]
    assert res.next_row_id == 103


@given(st.lists(st.sampled_from([
    "192.168.10.5,8.8.8.8,1,2,6,7/3/2017 9:05,1,1,BENIGN",
    "192.168.10.5,8.8.8.8,1,2,,7/3/2017 9:05,1,1,BENIGN",
    "x,8.8.8.8,1,2,6,7/3/2017 9:05,1,1,BENIGN",
    "192.168.10.5,8.8.8.8,1,2,6,7/3/2017 9:05,1,1,PortScan",
]), max_size=30))
def test_parsed_equals_accepted_plus_rejected(rows):
    res = ingest.parse_flow_csv(csv_bytes(*rows))
    assert res.n_rows == len(rows)


def test_write_rejections(tmp_path):
    path = tmp_path / "rej.csv"
    ingest.write_rejections([ingest.Rejection(3, "incomplete")], path)
    assert path.read_text() == "line_number,reason\n3,incomplete\n"


INTERNAL = InternalNetworks(["192.168.10.0/24"])


def test_clean_rules():
    kept_src = rec(0, "192.168.10.5", "8.8.8.8")
    dropped = rec(1, "1.2.3.4", "8.8.8.8")
    kept_both = rec(2, "192.168.10.5", "192.168.10.8")
    kept_dst = rec(3, "8.8.8.8", "192.168.10.8")
    assert ingest.clean([kept_src, dropped, kept_both, kept_dst], INTERNAL) == [kept_src, kept_both, kept_dst]


def test_clean_requires_internal_set():
    with pytest.raises(ingest.ConfigError):
        ingest.clean([rec(0)], [])


def test_internal_ip_file(tmp_path):
    path = tmp_path / "ips.txt"
    path.write_text("# victim network\n192.168.10.0/24\n\n205.174.165.73  # firewall\n")
    nets = InternalNetworks.from_file(path)
    assert "192.168.10.77" in nets and "205.174.165.73" in nets and "205.174.165.74" not in nets


ips = st.sampled_from(["192.168.10.1", "192.168.10.200", "8.8.8.8", "1.2.3.4", "10.0.0.1"])


@given(st.lists(st.tuples(ips, ips), max_size=40))
def test_clean_idempotent(pairs):
    records = [rec(i, s, d) for i, (s, d) in enumerate(pairs)]
    once = ingest.clean(records, INTERNAL)
    assert ingest.clean(once, INTERNAL) == once
    assert all(r.src_ip in INTERNAL or r.dst_ip in INTERNAL for r in once)


def test_split_by_day():
    days = [datetime(2017, 7, 3, 9), datetime(2017, 7, 4, 9), datetime(2017, 7, 7, 9)]
    records = [rec(i, ts=ts) for i, ts in enumerate(days)]
    split = ingest.split_by_day(records, date(2017, 7, 3))
    assert [r.row_id for r in split.train] == [0]
    assert [r.row_id for r in split.test] == [1, 2]


def test_split_all_on_train_day_warns(caplog):
    split = ingest.split_by_day([rec(0), rec(1)], date(2017, 7, 3))
    assert split.test == () and len(split.train) == 2
    assert "test split is empty" in caplog.text


def test_split_rejects_earlier_day():
    with pytest.raises(ingest.SplitError, match="precedes"):
        ingest.split_by_day([rec(0), rec(1, ts=datetime(2017, 7, 1, 9))], date(2017, 7, 3))


@given(st.lists(st.integers(0, 4), max_size=40))
def test_split_is_partition(day_offsets):
    records = [rec(i, ts=datetime(2017, 7, 3 + d, 12)) for i, d in enumerate([0, *day_offsets])]
    split = ingest.split_by_day(records, date(2017, 7, 3))
    ids = [r.row_id for r in split.train + split.test]
    assert sorted(ids) == list(range(len(records)))
    assert max(r.timestamp for r in split.train).date() < min(
        (r.timestamp.date() for r in split.test), default=date.max)


def test_day_histogram():
    records = [rec(0, ts=datetime(2017, 7, 3, 9)), rec(1, ts=datetime(2017, 7, 3, 9)),
               rec(2, ts=datetime(2017, 7, 4, 1))]
    hist = ingest.day_histogram(records)
    assert hist == {date(2017, 7, 3): {9: 2}, date(2017, 7, 4): {1: 1}}


def test_records_roundtrip(tmp_path):
    records = [rec(0), rec(5, "192.168.10.9", "1.1.1.1", datetime(2017, 7, 4, 23, 59, 59), "PortScan")]
    path = tmp_path / "records.csv"
    ingest.write_records(records, path, {0: "train", 5: "test"})
    back, tags = ingest.read_records(path)
    assert back == records and tags == {0: "train", 5: "test"}
