#include "ace/session_service.hpp"

#include <bit>
#include <cstring>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "ace/util.hpp"

namespace ace::service {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Generator

ModelGenerator::ModelGenerator(DiffusionTransformer<float> model, int diffusion_steps, int sampler_steps,
                               double guidance_scale, std::string checkpoint_id)
    : model_(std::move(model)),
      schedule_(NoiseSchedule::cosine(diffusion_steps)),
      sampler_steps_(std::min(sampler_steps, diffusion_steps)),
      guidance_scale_(guidance_scale),
      checkpoint_id_(std::move(checkpoint_id)) {}

std::shared_ptr<ModelGenerator> ModelGenerator::from_checkpoint(const std::filesystem::path& path, int sampler_steps,
                                                                double guidance_scale) {
    auto loaded = load_checkpoint(path);
    return std::make_shared<ModelGenerator>(std::move(loaded.model), loaded.meta.diffusion_steps, sampler_steps,
                                            guidance_scale, loaded.meta.id);
}

Image ModelGenerator::generate(const LongContextConditionUnit& lcu, int height, int width, std::uint64_t seed) const {
    SamplerConfig cfg;
    cfg.steps = sampler_steps_;
    cfg.guidance_scale = guidance_scale_;
    cfg.seed = seed;
    return sample_image(model_, schedule_, lcu, height, width, cfg);
}

// ---------------------------------------------------------------------------
// Sessions

LongContextConditionUnit turn_context(const SessionRecord& record, const TurnRequest& request, int m,
                                      int max_image_number, std::vector<int>* history_rounds) {
    std::vector<ConditionUnit> history;
    const std::size_t keep = std::min(record.rounds.size(), static_cast<std::size_t>(std::max(m, 0)));
    if (history_rounds) history_rounds->clear();
    try {
        for (std::size_t i = record.rounds.size() - keep; i < record.rounds.size(); ++i) {
            const Round& r = record.rounds[i];
            std::vector<FrameInput> frames;
            for (const auto& f : r.inputs) frames.push_back({f.image, f.mask, FrameRole::source});
            frames.push_back({r.output, std::nullopt, FrameRole::generated});
            history.push_back(build_cu(r.instruction, std::move(frames), TaskType::free_form, max_image_number));
            if (history_rounds) history_rounds->push_back(r.index);
        }
        std::vector<FrameInput> frames;
        for (const auto& f : request.frames) frames.push_back({f.image, f.mask, FrameRole::source});
        auto lcu = build_lcu(history, build_cu(request.instruction, std::move(frames), TaskType::free_form, max_image_number),
                             m, max_image_number);
        globalize_instruction(lcu, lcu.units.size() - 1);
        return lcu;
    } catch (const FrameCapError& e) {
        throw ServiceError(422, "frame_cap", e.what());
    } catch (const CuError& e) {
        throw ServiceError(400, "bad_request", e.what());
    }
}

SessionManager::SessionManager(std::shared_ptr<const Generator> generator, ManagerOptions options)
    : generator_(std::move(generator)), options_(options) {
    if (!generator_) throw std::invalid_argument("session manager needs a generator");
}

std::string SessionManager::create_session(int m, std::uint64_t seed) {
    if (m < 0 || m > options_.max_history) {
        throw ServiceError(400, "bad_request", "history window must lie in [0, " + std::to_string(options_.max_history) + "]");
    }
    auto s = std::make_shared<Session>();
    s->record.m = m;
    s->record.seed = seed;
    s->record.checkpoint_id = generator_->id();
    std::unique_lock lock(sessions_mu_);
    s->record.id = "s" + std::to_string(next_id_++);
    sessions_.emplace(s->record.id, s);
    return s->record.id;
}

std::shared_ptr<SessionManager::Session> SessionManager::find(const std::string& id) const {
    std::shared_lock lock(sessions_mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "not_found", "unknown session '" + id + "'");
    return it->second;
}

TurnResponse SessionManager::post_turn(const std::string& id, const TurnRequest& request) {
    auto session = find(id);
    std::lock_guard lock(session->mu);
    SessionRecord& rec = session->record;

    const int m = request.m.value_or(rec.m);
    if (m < 0 || m > options_.max_history) {
        throw ServiceError(400, "bad_request", "history window must lie in [0, " + std::to_string(options_.max_history) + "]");
    }
    int height = options_.default_canvas, width = options_.default_canvas;
    if (!request.frames.empty()) {
        height = request.frames.front().image.height;
        width = request.frames.front().image.width;
    } else if (!rec.rounds.empty()) {
        height = rec.rounds.back().output.height;
        width = rec.rounds.back().output.width;
    }

    std::vector<int> history_rounds;
    const auto lcu = turn_context(rec, request, m, options_.max_image_number, &history_rounds);
    const int index = static_cast<int>(rec.rounds.size()) + 1;
    const std::uint64_t seed = derive_seed(rec.seed, {static_cast<std::uint64_t>(index)});

    Image output;
    try {
        output = generator_->generate(lcu, height, width, seed);
    } catch (const FrameCapError& e) {
        throw ServiceError(422, "frame_cap", e.what());
    } catch (const CodecError& e) {
        throw ServiceError(422, "visual_cap", e.what());
    } catch (const CuError& e) {
        throw ServiceError(400, "bad_request", e.what());
    } catch (const std::exception& e) {
        throw ServiceError(500, "generation_failed", e.what());
    }

    Round r;
    r.index = index;
    r.instruction = request.instruction;
    r.inputs = request.frames;
    r.output = output;
    r.m = m;
    r.seed = seed;
    r.history_rounds = history_rounds;
    rec.rounds.push_back(std::move(r));

    TurnResponse resp;
    resp.round = index;
    resp.image = std::move(output);
    resp.history_rounds = std::move(history_rounds);
    resp.condition_frames = static_cast<int>(lcu.frame_count());
    return resp;
}

SessionRecord SessionManager::get(const std::string& id) const {
    auto session = find(id);
    std::lock_guard lock(session->mu);
    return session->record;
}

std::vector<std::uint8_t> SessionManager::image_png(const std::string& id, int round) const {
    auto session = find(id);
    std::lock_guard lock(session->mu);
    const auto& rounds = session->record.rounds;
    if (round < 1 || round > static_cast<int>(rounds.size())) {
        throw ServiceError(404, "not_found", "session '" + id + "' has no round " + std::to_string(round));
    }
    return encode_png(rounds[static_cast<std::size_t>(round - 1)].output);
}

std::size_t SessionManager::session_count() const {
    std::shared_lock lock(sessions_mu_);
    return sessions_.size();
}

// ---------------------------------------------------------------------------
// Transcripts

namespace {

json image_json(const Image& img) {
    std::vector<std::uint8_t> bytes(img.data.size() * 4);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const auto u = std::bit_cast<std::uint32_t>(img.data[i]);
        for (int k = 0; k < 4; ++k) bytes[i * 4 + static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(u >> (8 * k));
    }
    return {{"height", img.height}, {"width", img.width}, {"channels", img.channels}, {"data", base64_encode(bytes)}};
}

Image image_from_json(const json& j) {
    Image img(j.at("height").get<int>(), j.at("width").get<int>(), j.at("channels").get<int>());
    const auto bytes = base64_decode(j.at("data").get<std::string>());
    if (bytes.size() != img.data.size() * 4) throw std::invalid_argument("image payload size mismatch");
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        std::uint32_t u = 0;
        for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(bytes[i * 4 + static_cast<std::size_t>(k)]) << (8 * k);
        img.data[i] = std::bit_cast<float>(u);
    }
    return img;
}

}  // namespace

std::string export_transcript(const SessionRecord& record) {
    json rounds = json::array();
    for (const auto& r : record.rounds) {
        json inputs = json::array();
        for (const auto& f : r.inputs) {
            json jf{{"image", image_json(f.image)}};
            if (f.mask) jf["mask"] = image_json(*f.mask);
            inputs.push_back(std::move(jf));
        }
        rounds.push_back({{"round", r.index},
                          {"instruction", r.instruction},
                          {"m", r.m},
                          {"seed", std::to_string(r.seed)},
                          {"history_rounds", r.history_rounds},
                          {"inputs", std::move(inputs)},
                          {"output", image_json(r.output)}});
    }
    json doc{{"format", "ace-transcript"},
             {"version", 1},
             {"id", record.id},
             {"m", record.m},
             {"seed", std::to_string(record.seed)},
             {"checkpoint", record.checkpoint_id},
             {"rounds", std::move(rounds)}};
    return doc.dump(1);
}

SessionRecord parse_transcript(const std::string& text) {
    try {
        const json doc = json::parse(text);
        if (doc.at("format") != "ace-transcript" || doc.at("version") != 1) {
            throw std::invalid_argument("not a version-1 transcript");
        }
        SessionRecord rec;
        rec.id = doc.at("id").get<std::string>();
        rec.m = doc.at("m").get<int>();
        rec.seed = std::stoull(doc.at("seed").get<std::string>());
        rec.checkpoint_id = doc.value("checkpoint", "");
        for (const auto& jr : doc.at("rounds")) {
            Round r;
            r.index = jr.at("round").get<int>();
            r.instruction = jr.at("instruction").get<std::string>();
            r.m = jr.at("m").get<int>();
            r.seed = std::stoull(jr.at("seed").get<std::string>());
            r.history_rounds = jr.at("history_rounds").get<std::vector<int>>();
            for (const auto& jf : jr.at("inputs")) {
                TurnFrame f{image_from_json(jf.at("image")), std::nullopt};
                if (jf.contains("mask")) f.mask = image_from_json(jf.at("mask"));
                r.inputs.push_back(std::move(f));
            }
            r.output = image_from_json(jr.at("output"));
            rec.rounds.push_back(std::move(r));
        }
        return rec;
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed transcript: ") + e.what());
    } catch (const std::logic_error& e) {
        throw std::invalid_argument(std::string("malformed transcript: ") + e.what());
    }
}

ReplayResult replay_transcript(const SessionRecord& transcript, std::shared_ptr<const Generator> generator,
                               ManagerOptions options) {
    SessionManager manager(std::move(generator), options);
    const auto id = manager.create_session(transcript.m, transcript.seed);
    ReplayResult result;
    for (const auto& r : transcript.rounds) {
        TurnRequest req{r.instruction, r.inputs, r.m};
        const auto resp = manager.post_turn(id, req);
        ++result.rounds;
        if (resp.round != r.index || !bitwise_equal(resp.image, r.output)) result.mismatched_rounds.push_back(r.index);
    }
    return result;
}

// ---------------------------------------------------------------------------
// HTTP

struct HttpServer::Impl {
    Impl(SessionManager& m, ServerOptions o) : manager(m), options(std::move(o)) {}
    SessionManager& manager;
    ServerOptions options;
    httplib::Server server;
};

namespace {

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    res.status = status;
    res.set_content(json{{"code", code}, {"message", message}}.dump(), "application/json");
}

void send_json(httplib::Response& res, const json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
        json j = json::parse(req.body);
        if (!j.is_object()) throw ServiceError(400, "bad_request", "request body must be a JSON object");
        return j;
    } catch (const json::parse_error& e) {
        throw ServiceError(400, "bad_request", std::string("invalid JSON: ") + e.what());
    }
}

Image decode_upload(const json& v, const char* what) {
    if (!v.is_string()) throw ServiceError(400, "bad_request", std::string(what) + " must be a base64 PNG string");
    try {
        const auto bytes = base64_decode(v.get<std::string>());
        return decode_png(bytes);
    } catch (const std::exception& e) {
        throw ServiceError(400, "bad_request", std::string("cannot decode ") + what + ": " + e.what());
    }
}

TurnRequest turn_from_json(const json& body) {
    TurnRequest req;
    if (!body.contains("instruction") || !body["instruction"].is_string()) {
        throw ServiceError(400, "bad_request", "'instruction' (string) is required");
    }
    req.instruction = body["instruction"].get<std::string>();
    const json frames = body.value("frames", json::array());
    const json masks = body.value("masks", json::array());
    if (!frames.is_array() || !masks.is_array()) throw ServiceError(400, "bad_request", "'frames' and 'masks' must be arrays");
    if (masks.size() > frames.size()) throw ServiceError(400, "bad_request", "more masks than frames");
    for (std::size_t i = 0; i < frames.size(); ++i) {
        TurnFrame f{decode_upload(frames[i], "frame"), std::nullopt};
        if (i < masks.size() && !masks[i].is_null()) {
            Image mask = decode_upload(masks[i], "mask");
            if (mask.channels != 1) {
                Image gray(mask.height, mask.width, 1);
                for (int y = 0; y < mask.height; ++y) {
                    for (int x = 0; x < mask.width; ++x) gray.at(y, x, 0) = mask.at(y, x, 0);
                }
                mask = std::move(gray);
            }
            f.mask = std::move(mask);
        }
        req.frames.push_back(std::move(f));
    }
    if (body.contains("m") && !body["m"].is_null()) {
        if (!body["m"].is_number_integer()) throw ServiceError(400, "bad_request", "'m' must be an integer");
        req.m = body["m"].get<int>();
    }
    return req;
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const ServiceError& e) {
        send_error(res, e.status(), e.code(), e.what());
    } catch (const json::exception& e) {
        send_error(res, 400, "bad_request", e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
    }
}

}  // namespace

HttpServer::HttpServer(SessionManager& manager, ServerOptions options)
    : impl_(std::make_unique<Impl>(manager, std::move(options))) {
    auto& svr = impl_->server;
    auto& mgr = impl_->manager;
    const int threads = std::max(1, impl_->options.threads);
    svr.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    svr.set_default_headers({{"Access-Control-Allow-Origin", "*"}});

    svr.Get("/healthz", [&mgr](const httplib::Request&, httplib::Response& res) {
        send_json(res, {{"status", "ok"}, {"checkpoint", mgr.generator().id()}, {"sessions", mgr.session_count()}});
    });

    svr.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });

    svr.Post("/sessions", [&mgr](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const json body = parse_body(req);
            const json m = body.value("m", json(1));
            const json seed = body.value("seed", json(0));
            if (!m.is_number_integer()) throw ServiceError(400, "bad_request", "'m' must be an integer");
            if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<long long>() >= 0)) {
                throw ServiceError(400, "bad_request", "'seed' must be a non-negative integer");
            }
            const auto id = mgr.create_session(m.get<int>(), seed.get<std::uint64_t>());
            send_json(res, {{"id", id}, {"m", m}, {"seed", seed}}, 201);
        });
    });

    svr.Post(R"(/sessions/([^/]+)/turns)", [&mgr](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string id = req.matches[1];
            const auto turn = turn_from_json(parse_body(req));
            const auto resp = mgr.post_turn(id, turn);
            const auto png = encode_png(resp.image);
            send_json(res, {{"round", resp.round},
                            {"image", base64_encode(png)},
                            {"lcu", {{"history_rounds", resp.history_rounds},
                                     {"units", resp.history_rounds.size() + 1},
                                     {"condition_frames", resp.condition_frames}}}});
        });
    });

    svr.Get(R"(/sessions/([^/]+))", [&mgr](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto rec = mgr.get(req.matches[1]);
            json rounds = json::array();
            for (const auto& r : rec.rounds) {
                rounds.push_back({{"round", r.index},
                                  {"instruction", r.instruction},
                                  {"m", r.m},
                                  {"inputs", r.inputs.size()},
                                  {"history_rounds", r.history_rounds},
                                  {"image", "/sessions/" + rec.id + "/images/" + std::to_string(r.index)}});
            }
            send_json(res, {{"id", rec.id},
                            {"m", rec.m},
                            {"seed", rec.seed},
                            {"checkpoint", rec.checkpoint_id},
                            {"rounds", std::move(rounds)}});
        });
    });

    svr.Get(R"(/sessions/([^/]+)/transcript)", [&mgr](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { res.set_content(export_transcript(mgr.get(req.matches[1])), "application/json"); });
    });

    svr.Get(R"(/sessions/([^/]+)/images/(\d+))", [&mgr](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto png = mgr.image_png(req.matches[1], std::stoi(req.matches[2]));
            res.set_content(std::string(png.begin(), png.end()), "image/png");
        });
    });

    if (impl_->options.ui_dir) {
        if (!svr.set_mount_point("/", impl_->options.ui_dir->string())) {
            throw std::runtime_error("cannot serve UI from " + impl_->options.ui_dir->string());
        }
    }
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind() {
    auto& o = impl_->options;
    if (o.port == 0) {
        const int port = impl_->server.bind_to_any_port(o.host);
        if (port <= 0) throw std::runtime_error("cannot bind " + o.host);
        o.port = port;
    } else if (!impl_->server.bind_to_port(o.host, o.port)) {
        throw std::runtime_error("cannot bind " + o.host + ":" + std::to_string(o.port));
    }
    spdlog::info("listening on {}:{}", o.host, o.port);
    return o.port;
}

void HttpServer::serve() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace ace::service
