#!/usr/bin/env python3
"""Stream a leader CSV (header t,y,z) to a running service over TCP.

Sends one sample per service tick and prints the follower replies. Useful
for exercising a live `handover-cds serve` by hand:

    handover-cds serve --models out/bundle --listen 127.0.0.1:7420 &
    python scripts/replay_client.py --connect 127.0.0.1:7420 scenario.csv
"""

import argparse
import csv
import socket
import sys

from handover_cds.wire import LeaderSample, decode_message, encode_message


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("replay", help="CSV with header t,y,z")
    parser.add_argument("--connect", default="127.0.0.1:7420",
                        metavar="HOST:PORT")
    args = parser.parse_args(argv)

    host, _, port = args.connect.rpartition(":")
    with open(args.replay, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with socket.create_connection((host, int(port))) as sock:
        file = sock.makefile("rwb")
        for row in rows:
            sample = LeaderSample(t=float(row["t"]), y=float(row["y"]),
                                  z=float(row["z"]))
            file.write(encode_message(sample).encode())
            file.flush()
            reply = decode_message(file.readline())
            print(f"t={reply.t:7.3f}  follower=({reply.y:+.3f},"
                  f"{reply.z:+.3f})  intent={reply.intent}"
                  f"{'  [stale]' if reply.stale else ''}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
