#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nmp/tile_store.hpp"

// Networked tile exchange so several workers can share one prior store.
// Request frame:  u32 length, u8 op, u32 correlation_id, u32 client_id,
//                 payload. length counts everything after itself.
// Response frame: u32 length, u8 status, u32 correlation_id, payload.
// All integers little-endian; tiles travel in the tile file encoding, so
// the wire bytes are bit-exact with what lands on disk.
namespace nmp {

inline constexpr uint8_t kOpGetTiles = 0x01;  // payload: 4 x i32 bounds
inline constexpr uint8_t kOpPutTile = 0x02;   // u64 known_version, u32 n, tile
inline constexpr uint8_t kOpStats = 0x03;     // empty payload

inline constexpr uint8_t kStatusOk = 0x00;
inline constexpr uint8_t kStatusEmpty = 0x01;  // per-tile "missing" marker
inline constexpr uint8_t kStatusStaleMerged = 0x02;
inline constexpr uint8_t kStatusMalformed = 0x10;

inline constexpr uint32_t kMaxFrameBytes = 16u << 20;
inline constexpr int64_t kMaxRegionTiles = 4096;

// NMP_ADDR wins over whatever the config or flag said.
inline std::string resolved_service_address(const std::string& configured) {
    const char* env = std::getenv("NMP_ADDR");
    if (env && *env) return env;
    return configured;
}

inline std::pair<std::string, uint16_t> split_address(
    const std::string& addr) {
    const size_t colon = addr.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 >= addr.size())
        throw std::invalid_argument("address must be host:port, got '" +
                                    addr + "'");
    const int port = std::stoi(addr.substr(colon + 1));
    if (port < 0 || port > 65535)
        throw std::invalid_argument("port out of range in '" + addr + "'");
    return {addr.substr(0, colon), static_cast<uint16_t>(port)};
}

struct RemoteStats {
    uint64_t resident_bytes = 0;
    uint64_t dense_equivalent_bytes = 0;
    double ratio = 0.0;
    uint64_t known_tiles = 0;
};

namespace detail {

inline bool read_exact(int fd, void* buf, size_t n) {
    uint8_t* p = static_cast<uint8_t*>(buf);
    while (n > 0) {
        const ssize_t got = ::recv(fd, p, n, 0);
        if (got == 0) return false;  // orderly shutdown
        if (got < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        p += got;
        n -= static_cast<size_t>(got);
    }
    return true;
}

inline bool write_all(int fd, const void* buf, size_t n) {
    const uint8_t* p = static_cast<const uint8_t*>(buf);
    while (n > 0) {
        const ssize_t sent = ::send(fd, p, n, MSG_NOSIGNAL);
        if (sent < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        p += sent;
        n -= static_cast<size_t>(sent);
    }
    return true;
}

// Bounds-checked little-endian cursor over a received payload.
struct PayloadReader {
    const uint8_t* data;
    size_t size;
    size_t off = 0;

    template <typename T>
    bool get(T& out) {
        if (off + sizeof(T) > size) return false;
        std::memcpy(&out, data + off, sizeof(T));
        off += sizeof(T);
        return true;
    }
    bool done() const { return off == size; }
};

inline bool send_frame(int fd, uint8_t code, uint32_t correlation,
                       const std::vector<uint8_t>& payload,
                       std::optional<uint32_t> client_id = std::nullopt) {
    const uint32_t len = static_cast<uint32_t>(
        1 + 4 + (client_id ? 4 : 0) + payload.size());
    std::vector<uint8_t> frame;
    frame.reserve(4 + len);
    put_scalar<uint32_t>(frame, len);
    frame.push_back(code);
    put_scalar<uint32_t>(frame, correlation);
    if (client_id) put_scalar<uint32_t>(frame, *client_id);
    frame.insert(frame.end(), payload.begin(), payload.end());
    return write_all(fd, frame.data(), frame.size());
}

}  // namespace detail

// Serves one TileStore over TCP, one thread per session. Every request is
// answered exactly once; malformed content gets a kStatusMalformed response
// and the session keeps going, only an unreadable stream ends it.
class TileServer {
  public:
    TileServer(TileStore& store, const std::string& address)
        : store_(store) {
        const auto [host, port] = split_address(address);
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0)
            throw std::runtime_error("socket: " +
                                     std::string(std::strerror(errno)));
        const int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1) {
            ::close(listen_fd_);
            throw std::runtime_error("unusable bind host '" + host + "'");
        }
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&sa),
                   sizeof(sa)) != 0 ||
            ::listen(listen_fd_, 64) != 0) {
            const std::string err = std::strerror(errno);
            ::close(listen_fd_);
            throw std::runtime_error("bind " + address + ": " + err);
        }
        sockaddr_in bound{};
        socklen_t blen = sizeof(bound);
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &blen);
        port_ = ntohs(bound.sin_port);
        host_ = host;
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    TileServer(const TileServer&) = delete;
    TileServer& operator=(const TileServer&) = delete;
    ~TileServer() { stop(); }

    uint16_t port() const { return port_; }
    std::string address() const {
        return host_ + ":" + std::to_string(port_);
    }

    void stop() {
        bool expected = false;
        if (!stopping_.compare_exchange_strong(expected, true)) return;
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        {
            std::lock_guard lk(sessions_m_);
            for (int fd : session_fds_) ::shutdown(fd, SHUT_RDWR);
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        for (auto& t : session_threads_)
            if (t.joinable()) t.join();
    }

  private:
    void accept_loop() {
        while (!stopping_.load()) {
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) {
                if (errno == EINTR) continue;
                return;  // listener closed
            }
            std::lock_guard lk(sessions_m_);
            if (stopping_.load()) {
                ::close(fd);
                return;
            }
            session_fds_.push_back(fd);
            session_threads_.emplace_back([this, fd] { session(fd); });
        }
    }

    void session(int fd) {
        const int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        std::vector<uint8_t> body;
        while (true) {
            uint32_t len;
            if (!detail::read_exact(fd, &len, 4)) break;
            if (len < 9 || len > kMaxFrameBytes) break;  // unrecoverable
            body.resize(len);
            if (!detail::read_exact(fd, body.data(), len)) break;
            const uint8_t op = body[0];
            uint32_t correlation, client_id;
            std::memcpy(&correlation, body.data() + 1, 4);
            std::memcpy(&client_id, body.data() + 5, 4);
            (void)client_id;
            detail::PayloadReader payload{body.data() + 9, len - 9};
            if (!handle(fd, op, correlation, payload)) break;
        }
        ::close(fd);
    }

    bool handle(int fd, uint8_t op, uint32_t correlation,
                detail::PayloadReader& in) {
        switch (op) {
            case kOpGetTiles:
                return handle_get(fd, correlation, in);
            case kOpPutTile:
                return handle_put(fd, correlation, in);
            case kOpStats:
                return handle_stats(fd, correlation, in);
            default:
                return malformed(fd, correlation,
                                 "unknown op " + std::to_string(op));
        }
    }

    bool malformed(int fd, uint32_t correlation, const std::string& msg) {
        std::vector<uint8_t> payload;
        detail::put_scalar<uint32_t>(payload,
                                     static_cast<uint32_t>(msg.size()));
        detail::put_bytes(payload, msg.data(), msg.size());
        return detail::send_frame(fd, kStatusMalformed, correlation, payload);
    }

    bool handle_get(int fd, uint32_t correlation, detail::PayloadReader& in) {
        int32_t ix0, ix1, iy0, iy1;
        if (!in.get(ix0) || !in.get(ix1) || !in.get(iy0) || !in.get(iy1) ||
            !in.done())
            return malformed(fd, correlation, "GET_TILES wants 4 x i32");
        if (ix0 > ix1 || iy0 > iy1)
            return malformed(fd, correlation, "empty tile region");
        const int64_t count = (int64_t{ix1} - ix0 + 1) * (int64_t{iy1} - iy0 + 1);
        if (count > kMaxRegionTiles)
            return malformed(fd, correlation, "region too large");

        std::vector<uint8_t> payload;
        detail::put_scalar<uint32_t>(payload, static_cast<uint32_t>(count));
        for (int32_t ix = ix0; ix <= ix1; ++ix)
            for (int32_t iy = iy0; iy <= iy1; ++iy) {
                const auto tile = store_.get_tile_copy(TileKey{ix, iy});
                if (!tile) {
                    payload.push_back(kStatusEmpty);
                    continue;
                }
                payload.push_back(kStatusOk);
                const std::vector<uint8_t> bytes = save_tile(*tile);
                detail::put_scalar<uint32_t>(
                    payload, static_cast<uint32_t>(bytes.size()));
                detail::put_bytes(payload, bytes.data(), bytes.size());
            }
        return detail::send_frame(fd, kStatusOk, correlation, payload);
    }

    bool handle_put(int fd, uint32_t correlation, detail::PayloadReader& in) {
        uint64_t known_version;
        uint32_t nbytes;
        if (!in.get(known_version) || !in.get(nbytes) ||
            in.off + nbytes != in.size)
            return malformed(fd, correlation, "PUT_TILE framing");
        MapTile tile;
        try {
            tile = load_tile(in.data + in.off, nbytes);
        } catch (const std::exception& e) {
            return malformed(fd, correlation, e.what());
        }
        PutStatus status;
        uint64_t new_version;
        try {
            std::tie(status, new_version) = store_.apply_put(tile, known_version);
        } catch (const std::exception& e) {
            return malformed(fd, correlation, e.what());
        }
        std::vector<uint8_t> payload;
        detail::put_scalar<uint64_t>(payload, new_version);
        return detail::send_frame(
            fd,
            status == PutStatus::ok ? kStatusOk : kStatusStaleMerged,
            correlation, payload);
    }

    bool handle_stats(int fd, uint32_t correlation,
                      detail::PayloadReader& in) {
        if (!in.done()) return malformed(fd, correlation, "STATS takes nothing");
        const MemoryStats s = store_.memory_stats();
        std::vector<uint8_t> payload;
        detail::put_scalar<uint64_t>(payload, s.resident_bytes);
        detail::put_scalar<uint64_t>(payload, s.dense_equivalent_bytes);
        detail::put_scalar<double>(payload, s.ratio);
        detail::put_scalar<uint64_t>(payload, store_.known_tiles().size());
        return detail::send_frame(fd, kStatusOk, correlation, payload);
    }

    TileStore& store_;
    int listen_fd_ = -1;
    uint16_t port_ = 0;
    std::string host_;
    std::atomic<bool> stopping_{false};
    std::thread accept_thread_;
    std::mutex sessions_m_;
    std::vector<int> session_fds_;
    std::vector<std::thread> session_threads_;
};

// Blocking request/response handle; one per worker, not shareable. Network
// failures throw (retryable by reconnecting); a response that violates the
// protocol closes the session before throwing.
class TileClient {
  public:
    explicit TileClient(const std::string& address, uint32_t client_id = 0,
                        int timeout_ms = 0)
        : client_id_(client_id) {
        const auto [host, port] = split_address(address);
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd_ < 0)
            throw std::runtime_error("socket: " +
                                     std::string(std::strerror(errno)));
        if (timeout_ms > 0) {
            timeval tv{timeout_ms / 1000, (timeout_ms % 1000) * 1000};
            ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
            ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
        }
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1) {
            ::close(fd_);
            throw std::runtime_error("unusable host '" + host + "'");
        }
        if (::connect(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) !=
            0) {
            const std::string err = std::strerror(errno);
            ::close(fd_);
            throw std::runtime_error("connect " + address + ": " + err);
        }
        const int one = 1;
        ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    }

    TileClient(const TileClient&) = delete;
    TileClient& operator=(const TileClient&) = delete;
    ~TileClient() {
        if (fd_ >= 0) ::close(fd_);
    }

    // Tiles of the inclusive region, row-major over ix then iy; nullopt
    // marks a tile the server has never seen.
    std::vector<std::pair<TileKey, std::optional<MapTile>>> get_tiles(
        int32_t ix0, int32_t ix1, int32_t iy0, int32_t iy1) {
        std::vector<uint8_t> req;
        detail::put_scalar<int32_t>(req, ix0);
        detail::put_scalar<int32_t>(req, ix1);
        detail::put_scalar<int32_t>(req, iy0);
        detail::put_scalar<int32_t>(req, iy1);
        auto [status, payload] = roundtrip(kOpGetTiles, req);
        if (status != kStatusOk) fail(status, payload);

        detail::PayloadReader in{payload.data(), payload.size()};
        uint32_t count;
        if (!in.get(count)) protocol_violation("GET_TILES reply truncated");
        std::vector<std::pair<TileKey, std::optional<MapTile>>> out;
        out.reserve(count);
        for (int32_t ix = ix0; ix <= ix1; ++ix)
            for (int32_t iy = iy0; iy <= iy1; ++iy) {
                uint8_t marker;
                if (!in.get(marker))
                    protocol_violation("GET_TILES reply truncated");
                if (marker == kStatusEmpty) {
                    out.emplace_back(TileKey{ix, iy}, std::nullopt);
                    continue;
                }
                if (marker != kStatusOk)
                    protocol_violation("bad tile marker");
                uint32_t nbytes;
                if (!in.get(nbytes) || in.off + nbytes > in.size)
                    protocol_violation("GET_TILES reply truncated");
                MapTile t = load_tile(in.data + in.off, nbytes);
                in.off += nbytes;
                out.emplace_back(TileKey{ix, iy}, std::move(t));
            }
        if (out.size() != count || !in.done())
            protocol_violation("GET_TILES reply size mismatch");
        return out;
    }

    std::pair<PutStatus, uint64_t> put_tile(const MapTile& tile,
                                            uint64_t known_version) {
        // Callers may hand over raw weights; the wire encoding needs the
        // canonical form, same as the store applies on ingest.
        MapTile canon = tile;
        for (auto& w : canon.weight) w = canonical_weight(w);
        std::vector<uint8_t> req;
        detail::put_scalar<uint64_t>(req, known_version);
        const std::vector<uint8_t> bytes = save_tile(canon);
        detail::put_scalar<uint32_t>(req, static_cast<uint32_t>(bytes.size()));
        detail::put_bytes(req, bytes.data(), bytes.size());
        auto [status, payload] = roundtrip(kOpPutTile, req);
        if (status != kStatusOk && status != kStatusStaleMerged)
            fail(status, payload);
        detail::PayloadReader in{payload.data(), payload.size()};
        uint64_t new_version;
        if (!in.get(new_version) || !in.done())
            protocol_violation("PUT_TILE reply truncated");
        return {status == kStatusOk ? PutStatus::ok : PutStatus::stale_merged,
                new_version};
    }

    RemoteStats stats() {
        auto [status, payload] = roundtrip(kOpStats, {});
        if (status != kStatusOk) fail(status, payload);
        detail::PayloadReader in{payload.data(), payload.size()};
        RemoteStats s;
        if (!in.get(s.resident_bytes) || !in.get(s.dense_equivalent_bytes) ||
            !in.get(s.ratio) || !in.get(s.known_tiles) || !in.done())
            protocol_violation("STATS reply truncated");
        return s;
    }

  private:
    [[noreturn]] void protocol_violation(const std::string& msg) {
        ::close(fd_);
        fd_ = -1;
        throw std::runtime_error("tile service protocol violation: " + msg);
    }

    [[noreturn]] void fail(uint8_t status, const std::vector<uint8_t>& payload) {
        std::string msg = "status " + std::to_string(status);
        if (status == kStatusMalformed && payload.size() >= 4) {
            uint32_t n;
            std::memcpy(&n, payload.data(), 4);
            if (4 + n <= payload.size())
                msg += ": " + std::string(payload.begin() + 4,
                                          payload.begin() + 4 + n);
        }
        throw std::runtime_error("tile service request failed, " + msg);
    }

    std::pair<uint8_t, std::vector<uint8_t>> roundtrip(
        uint8_t op, const std::vector<uint8_t>& payload) {
        if (fd_ < 0) throw std::runtime_error("tile client disconnected");
        const uint32_t correlation = next_correlation_++;
        if (!detail::send_frame(fd_, op, correlation, payload, client_id_))
            protocol_violation("send failed: " +
                               std::string(std::strerror(errno)));
        uint32_t len;
        if (!detail::read_exact(fd_, &len, 4))
            protocol_violation("connection lost");
        if (len < 5 || len > kMaxFrameBytes)
            protocol_violation("bad reply length");
        std::vector<uint8_t> body(len);
        if (!detail::read_exact(fd_, body.data(), len))
            protocol_violation("connection lost");
        uint32_t got_correlation;
        std::memcpy(&got_correlation, body.data() + 1, 4);
        if (got_correlation != correlation)
            protocol_violation("correlation id mismatch");
        return {body[0], std::vector<uint8_t>(body.begin() + 5, body.end())};
    }

    int fd_ = -1;
    uint32_t client_id_;
    uint32_t next_correlation_ = 1;
};

// PriorStore backed by a remote server: tiles are fetched into a local
// in-memory mirror before every query or write, and refined tiles are
// uploaded with the last version each was seen at, so the server can spot
// stale writers and fall back to its per-cell merge.
class RemotePriorStore : public PriorStore {
  public:
    RemotePriorStore(GridSpec bev, const std::string& address,
                     uint32_t client_id = 0, double store_resolution = 0.0,
                     int timeout_ms = 0)
        : client_(address, client_id, timeout_ms),
          cache_(bev, "", size_t{1} << 40, store_resolution) {}

    FeatureMap query_region(const EgoPose& pose) override {
        refresh(pose);
        return cache_.query_region(pose);
    }

    std::vector<TileKey> write_back(const EgoPose& pose,
                                    const FeatureMap& new_prior) override {
        refresh(pose);
        const std::vector<TileKey> touched =
            cache_.write_back(pose, new_prior);
        for (TileKey k : touched) {
            const MapTile tile = *cache_.get_tile_copy(k);
            const auto it = server_version_.find(k);
            const uint64_t known =
                it == server_version_.end() ? 0 : it->second;
            const auto [status, new_version] = client_.put_tile(tile, known);
            (void)status;
            server_version_[k] = new_version;
        }
        return touched;
    }

    MemoryStats memory_stats() override {
        const RemoteStats s = client_.stats();
        return MemoryStats{s.resident_bytes, s.dense_equivalent_bytes,
                           s.ratio};
    }

    // Drops the local mirror only; the protocol has no remote wipe.
    void clear() override {
        cache_.clear();
        server_version_.clear();
    }

    TileClient& client() { return client_; }

  private:
    void refresh(const EgoPose& pose) {
        const std::vector<TileKey> keys = overlapping_tiles(
            cache_.store_spec(),
            local_grid_coords(cache_.bev_spec(), pose));
        const auto got = client_.get_tiles(keys.front().ix, keys.back().ix,
                                           keys.front().iy, keys.back().iy);
        for (const auto& [key, tile] : got) {
            if (!tile) continue;
            server_version_[key] = tile->version;
            const auto local = cache_.get_tile_copy(key);
            cache_.apply_put(*tile, local ? local->version : 0);
        }
    }

    TileClient client_;
    TileStore cache_;
    std::unordered_map<TileKey, uint64_t, TileKeyHash> server_version_;
};

}  // namespace nmp
