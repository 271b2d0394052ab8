#include "nmp/tile_service.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <thread>

#include "nmp/random.hpp"
#include "nmp/tile_store.hpp"

using namespace nmp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("nmp_service_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

GridSpec tiny_spec() {
    GridSpec g;
    g.resolution = 0.3;
    g.bev_rows = 16;
    g.bev_cols = 8;
    g.channels = 2;
    g.tile_edge = 8;
    return g;
}

struct ServerFixture : ::testing::Test {
    TempDir dir;
    GridSpec spec = tiny_spec();
    TileStore store{spec, dir.str()};
    TileServer server{store, "127.0.0.1:0"};

    TileClient connect(uint32_t client_id = 0) {
        return TileClient(server.address(), client_id, 10000);
    }
};

MapTile tile_with_cells(
    TileKey key, const std::vector<std::tuple<size_t, float, float>>& cells) {
    MapTile t(key, 8, 2);
    for (const auto& [n, w, f] : cells) {
        t.weight[n] = w;
        t.features[2 * n] = f;
        t.features[2 * n + 1] = -f;
    }
    return t;
}

// Content equality, ignoring version/timestamp metadata.
void expect_same_cells(const MapTile& a, const MapTile& b) {
    ASSERT_EQ(a.tile_edge, b.tile_edge);
    ASSERT_EQ(a.channels, b.channels);
    ASSERT_EQ(std::memcmp(a.weight.data(), b.weight.data(),
                          a.weight.size() * 4),
              0);
    ASSERT_EQ(std::memcmp(a.features.data(), b.features.data(),
                          a.features.size() * 4),
              0);
}

using ServiceAddress = ServerFixture;
using GetTiles = ServerFixture;
using PutTile = ServerFixture;
using Sessions = ServerFixture;
using ServiceConcurrency = ServerFixture;
using RemoteStore = ServerFixture;

TEST(SplitAddress, ParsesAndRejects) {
    const auto [host, port] = split_address("127.0.0.1:4833");
    EXPECT_EQ(host, "127.0.0.1");
    EXPECT_EQ(port, 4833);
    EXPECT_THROW(split_address("no-port"), std::invalid_argument);
    EXPECT_THROW(split_address(":123"), std::invalid_argument);
    EXPECT_THROW(split_address("x:"), std::invalid_argument);
    EXPECT_THROW(split_address("x:99999"), std::invalid_argument);
}

TEST(ServiceAddressEnv, NmpAddrOverridesConfiguredValue) {
    ::unsetenv("NMP_ADDR");
    EXPECT_EQ(resolved_service_address("10.0.0.1:5"), "10.0.0.1:5");
    ::setenv("NMP_ADDR", "127.0.0.1:777", 1);
    EXPECT_EQ(resolved_service_address("10.0.0.1:5"), "127.0.0.1:777");
    ::unsetenv("NMP_ADDR");
}

TEST_F(GetTiles, MissingTileIsOkWithEmptyMarker) {
    TileClient client = connect();
    const auto got = client.get_tiles(3, 3, -2, -2);
    ASSERT_EQ(got.size(), 1u);
    EXPECT_EQ(got[0].first, (TileKey{3, -2}));
    EXPECT_FALSE(got[0].second.has_value());
}

TEST_F(GetTiles, RegionComesBackRowMajorWithMixedPresence) {
    TileClient client = connect();
    client.put_tile(tile_with_cells({0, 0}, {{0, 1.0f, 5.0f}}), 0);
    client.put_tile(tile_with_cells({1, 0}, {{1, 2.0f, 6.0f}}), 0);

    const auto got = client.get_tiles(0, 2, 0, 0);
    ASSERT_EQ(got.size(), 3u);
    EXPECT_EQ(got[0].first, (TileKey{0, 0}));
    EXPECT_EQ(got[1].first, (TileKey{1, 0}));
    EXPECT_EQ(got[2].first, (TileKey{2, 0}));
    ASSERT_TRUE(got[0].second.has_value());
    ASSERT_TRUE(got[1].second.has_value());
    EXPECT_FALSE(got[2].second.has_value());
    EXPECT_EQ(got[0].second->features[0], 5.0f);
    EXPECT_EQ(got[1].second->features[2 * 1], 6.0f);
}

TEST_F(GetTiles, OversizedRegionIsRejected) {
    TileClient client = connect();
    EXPECT_THROW(client.get_tiles(0, 999, 0, 999), std::runtime_error);
    // The session survives the refused request.
    EXPECT_NO_THROW(client.get_tiles(0, 0, 0, 0));
}

TEST_F(PutTile, RoundTripsThroughTheMergeRule) {
    TileClient client = connect();
    const MapTile a = tile_with_cells({4, 7}, {{0, 2.0f, 1.5f}, {5, 0.5f, 2.5f}});
    const auto [st, v] = client.put_tile(a, 0);
    EXPECT_EQ(st, PutStatus::ok);
    EXPECT_EQ(v, 1u);

    const auto got = client.get_tiles(4, 4, 7, 7);
    ASSERT_TRUE(got[0].second.has_value());
    const MapTile& back = *got[0].second;
    EXPECT_EQ(back.version, 1u);
    EXPECT_EQ(back.weight[0], canonical_weight(2.0f));
    EXPECT_EQ(back.weight[5], canonical_weight(0.5f));
    EXPECT_EQ(back.features[0], 1.5f);
    EXPECT_EQ(back.features[11], -2.5f);
}

TEST_F(PutTile, CurrentVersionReplacesOutright) {
    TileClient client = connect();
    const auto [st1, v1] =
        client.put_tile(tile_with_cells({0, 0}, {{0, 5.0f, 1.0f}}), 0);
    ASSERT_EQ(st1, PutStatus::ok);
    const MapTile b = tile_with_cells({0, 0}, {{3, 1.0f, 9.0f}});
    const auto [st2, v2] = client.put_tile(b, v1);
    EXPECT_EQ(st2, PutStatus::ok);
    EXPECT_EQ(v2, v1 + 1);

    const auto got = client.get_tiles(0, 0, 0, 0);
    EXPECT_EQ(got[0].second->weight[0], 0.0f);  // replaced away
    EXPECT_EQ(got[0].second->features[6], 9.0f);
}

TEST_F(PutTile, StaleWriterLosesToHeavierServerCells) {
    TileClient client = connect();
    client.put_tile(tile_with_cells({0, 0}, {{0, 5.0f, 1.0f}}), 0);
    // known_version 0 is stale now; cell 0 is lighter, cell 1 is new.
    const MapTile b =
        tile_with_cells({0, 0}, {{0, 1.0f, 2.0f}, {1, 2.0f, 3.0f}});
    const auto [st, v] = client.put_tile(b, 0);
    EXPECT_EQ(st, PutStatus::stale_merged);
    EXPECT_EQ(v, 2u);

    const auto got = client.get_tiles(0, 0, 0, 0);
    EXPECT_EQ(got[0].second->features[0], 1.0f);  // server cell retained
    EXPECT_EQ(got[0].second->weight[0], canonical_weight(5.0f));
    EXPECT_EQ(got[0].second->features[2], 3.0f);  // new cell landed
}

TEST_F(PutTile, VersionsSeenByOneClientNeverDecrease) {
    TileClient client = connect();
    Rng rng(5);
    uint64_t last = 0;
    for (int step = 0; step < 20; ++step) {
        if (step % 3 != 2) {
            const auto [st, v] = client.put_tile(
                tile_with_cells(
                    {0, 0},
                    {{rng.uniform_int(0, 63),
                      static_cast<float>(rng.uniform(0.1, 4.0)),
                      rng.gaussianf()}}),
                rng.uniform() < 0.5 ? last : 0);
            EXPECT_GE(v, last);
            last = v;
        } else {
            const auto got = client.get_tiles(0, 0, 0, 0);
            ASSERT_TRUE(got[0].second.has_value());
            EXPECT_GE(got[0].second->version, last);
            last = got[0].second->version;
        }
    }
}

TEST_F(Sessions, MalformedRequestsGetErrorResponsesAndSessionSurvives) {
    // Raw framing, bypassing TileClient's well-formedness.
    const auto [host, port] = split_address(server.address());
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    ASSERT_GE(fd, 0);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    ASSERT_EQ(::inet_pton(AF_INET, host.c_str(), &sa.sin_addr), 1);
    ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)), 0);

    auto expect_status = [&](uint8_t want) {
        uint32_t len;
        ASSERT_TRUE(detail::read_exact(fd, &len, 4));
        std::vector<uint8_t> body(len);
        ASSERT_TRUE(detail::read_exact(fd, body.data(), len));
        EXPECT_EQ(body[0], want);
    };

    // Unknown op code.
    ASSERT_TRUE(detail::send_frame(fd, 0x7F, 1, {}, 42));
    expect_status(kStatusMalformed);
    // GET_TILES with a short payload.
    ASSERT_TRUE(detail::send_frame(fd, kOpGetTiles, 2, {1, 2, 3}, 42));
    expect_status(kStatusMalformed);
    // PUT_TILE whose tile bytes are garbage.
    std::vector<uint8_t> bad;
    detail::put_scalar<uint64_t>(bad, 0);
    detail::put_scalar<uint32_t>(bad, 4);
    detail::put_bytes(bad, "XXXX", 4);
    ASSERT_TRUE(detail::send_frame(fd, kOpPutTile, 3, bad, 42));
    expect_status(kStatusMalformed);
    // The same session still answers a well-formed request.
    ASSERT_TRUE(detail::send_frame(fd, kOpStats, 4, {}, 42));
    expect_status(kStatusOk);
    ::close(fd);
}

TEST_F(Sessions, StatsReflectTheStore) {
    TileClient client = connect();
    MapTile full(TileKey{0, 0}, 8, 2);
    for (size_t n = 0; n < full.weight.size(); ++n) full.weight[n] = 1.0f;
    client.put_tile(full, 0);

    const RemoteStats s = client.stats();
    EXPECT_EQ(s.resident_bytes, 8u * 8 * 2 * 4);
    EXPECT_EQ(s.dense_equivalent_bytes, 8u * 8 * 2 * 4);
    EXPECT_EQ(s.ratio, 1.0);
    EXPECT_EQ(s.known_tiles, 1u);
}

TEST_F(ServiceConcurrency, DisjointPutsBothSurviveEveryTime) {
    constexpr int kRounds = 100;
    std::thread a([&] {
        TileClient client = connect(1);
        for (int i = 0; i < kRounds; ++i)
            client.put_tile(
                tile_with_cells({i, 0}, {{0, 1.0f, i + 0.5f}}), 0);
    });
    std::thread b([&] {
        TileClient client = connect(2);
        for (int i = 0; i < kRounds; ++i)
            client.put_tile(
                tile_with_cells({i, 1}, {{1, 2.0f, i + 0.25f}}), 0);
    });
    a.join();
    b.join();

    TileClient reader = connect(3);
    for (int i = 0; i < kRounds; ++i) {
        const auto got = reader.get_tiles(i, i, 0, 1);
        ASSERT_TRUE(got[0].second.has_value()) << "round " << i;
        ASSERT_TRUE(got[1].second.has_value()) << "round " << i;
        EXPECT_EQ(got[0].second->features[0], i + 0.5f);
        EXPECT_EQ(got[1].second->features[2], i + 0.25f);
    }
}

TEST_F(ServiceConcurrency, SharedTileFinalStateMatchesSomeSerialOrder) {
    Rng rng(31);
    for (int round = 0; round < 20; ++round) {
        const TileKey key{round, 100};
        // Two writers, two puts each, all with known_version 0. A tie weight
        // on cell 0 makes the outcome genuinely order-dependent.
        const float tie = static_cast<float>(rng.uniform(0.5, 3.0));
        const std::vector<MapTile> writer_a = {
            tile_with_cells(key, {{0, tie, 1.0f}}),
            tile_with_cells(key, {{1, 3.0f, 2.0f}})};
        const std::vector<MapTile> writer_b = {
            tile_with_cells(key, {{0, tie, 10.0f}}),
            tile_with_cells(key, {{2, 1.0f, 20.0f}})};

        std::thread ta([&] {
            TileClient c = connect(1);
            for (const MapTile& t : writer_a) c.put_tile(t, 0);
        });
        std::thread tb([&] {
            TileClient c = connect(2);
            for (const MapTile& t : writer_b) c.put_tile(t, 0);
        });
        ta.join();
        tb.join();

        TileClient reader = connect(3);
        const auto got = reader.get_tiles(key.ix, key.ix, key.iy, key.iy);
        ASSERT_TRUE(got[0].second.has_value());
        const MapTile& merged = *got[0].second;
        EXPECT_EQ(merged.version, 4u);

        // Enumerate every interleaving that preserves per-writer order and
        // replay it against a fresh local store.
        std::vector<int> order = {0, 0, 1, 1};
        bool matched = false;
        std::vector<float> max_weight(merged.weight.size(), 0.0f);
        do {
            TileStore oracle(spec, "", 1024);
            int ai = 0, bi = 0;
            for (int who : order) {
                const MapTile& t = who == 0 ? writer_a[ai++] : writer_b[bi++];
                oracle.apply_put(t, 0);
            }
            const MapTile want = *oracle.get_tile_copy(key);
            for (size_t n = 0; n < want.weight.size(); ++n)
                max_weight[n] = std::max(max_weight[n], want.weight[n]);
            matched |= std::memcmp(want.weight.data(), merged.weight.data(),
                                   want.weight.size() * 4) == 0 &&
                       std::memcmp(want.features.data(), merged.features.data(),
                                   want.features.size() * 4) == 0;
        } while (std::next_permutation(order.begin(), order.end()));
        EXPECT_TRUE(matched) << "round " << round;

        // Per-cell max-weight oracle: with every put stale-or-first, the
        // final weight is the max over all writes ever applied.
        for (size_t n = 0; n < merged.weight.size(); ++n)
            ASSERT_EQ(merged.weight[n], max_weight[n]);
    }
}

TEST_F(RemoteStore, MirrorsALocalStoreExactly) {
    TempDir local_dir;
    TileStore local(spec, local_dir.str());
    RemotePriorStore remote(spec, server.address(), 9, 0.0, 10000);

    const std::vector<EgoPose> poses = {
        {0.0, 0.0, 0.0}, {1.3, 0.4, 0.3}, {2.6, 0.8, 0.6}};
    for (size_t i = 0; i < poses.size(); ++i) {
        FeatureMap bev(spec.bev_rows, spec.bev_cols, spec.channels);
        Rng rng(derive_seed(600, i));
        for (auto& v : bev.data)
            v = static_cast<float>(rng.uniform(-1.0, 1.0));

        const auto touched_l = local.write_back(poses[i], bev);
        const auto touched_r = remote.write_back(poses[i], bev);
        EXPECT_EQ(touched_l, touched_r);

        const FeatureMap ql = local.query_region(poses[i]);
        const FeatureMap qr = remote.query_region(poses[i]);
        ASSERT_EQ(ql.coverage, qr.coverage);
        for (size_t n = 0; n < ql.data.size(); ++n)
            ASSERT_EQ(ql.data[n], qr.data[n]);
    }

    // The server's tiles match the local store cell for cell.
    TileClient reader = connect(10);
    for (TileKey k : local.known_tiles()) {
        const auto got = reader.get_tiles(k.ix, k.ix, k.iy, k.iy);
        ASSERT_TRUE(got[0].second.has_value());
        expect_same_cells(*got[0].second, *local.get_tile_copy(k));
        EXPECT_EQ(got[0].second->version, local.get_tile_copy(k)->version);
    }

    const MemoryStats sl = local.memory_stats();
    const MemoryStats sr = remote.memory_stats();
    EXPECT_EQ(sl.resident_bytes, sr.resident_bytes);
    EXPECT_EQ(sl.dense_equivalent_bytes, sr.dense_equivalent_bytes);
}

TEST_F(RemoteStore, TwoWorkersShareOnePrior) {
    RemotePriorStore w1(spec, server.address(), 1, 0.0, 10000);
    RemotePriorStore w2(spec, server.address(), 2, 0.0, 10000);
    const EgoPose pose{0.5, 0.2, 0.1};

    FeatureMap bev1(spec.bev_rows, spec.bev_cols, spec.channels, 1.0f);
    FeatureMap bev2(spec.bev_rows, spec.bev_cols, spec.channels, 2.0f);
    w1.write_back(pose, bev1);

    // The second worker sees the first worker's map before writing its own.
    const FeatureMap seen = w2.query_region(pose);
    size_t covered = 0;
    for (size_t n = 0; n < seen.coverage.size(); ++n)
        if (seen.coverage[n]) {
            ++covered;
            EXPECT_NEAR(seen.data[n * spec.channels], 1.0f, 1e-5f);
        }
    EXPECT_GT(covered, 0.6 * spec.bev_rows * spec.bev_cols);

    w2.write_back(pose, bev2);
    const FeatureMap after = w1.query_region(pose);
    for (size_t n = 0; n < after.coverage.size(); ++n)
        if (after.coverage[n])
            EXPECT_NEAR(after.data[n * spec.channels], 2.0f, 1e-5f);
}

}  // namespace
